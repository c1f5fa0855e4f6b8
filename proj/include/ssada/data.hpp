#pragma once

// Synthetic two-domain shape dataset: clean source scenes, foggy target scenes.

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssada/boxes.hpp"

namespace ssada {

class GenerationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DataIoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DataLoadError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class ShapeClass : int { Disk = 0, Square = 1, Triangle = 2 };
inline constexpr int kShapeClasses = 3;
const char* shape_class_name(ShapeClass cls);

inline constexpr int kSceneSize = 64;
inline constexpr int kMinObjects = 1;
inline constexpr int kMaxObjects = 4;
inline constexpr int kMinScale = 6;
inline constexpr int kMaxScale = 16;
inline constexpr double kMinCenterDistance = 8.0;
inline constexpr int kPlacementAttempts = 100;
inline constexpr int kNoiseGrid = 5;
inline constexpr double kBackgroundMax = 0.45;
inline constexpr double kColorMin = 0.6;

/// Scale is the radius of a disk and the half-extent of a square or triangle.
/// Centres and scales are whole pixels so shapes rasterise to exact boxes.
struct SceneObject {
    ShapeClass cls = ShapeClass::Disk;
    int cx = 0, cy = 0;
    int scale = kMinScale;
    std::array<double, 3> color{};
};

struct SceneSpec {
    std::uint64_t seed = 0;
    int size = kSceneSize;
    std::vector<SceneObject> objects;
    /// Per-channel kNoiseGrid x kNoiseGrid control points, bilinearly upsampled.
    std::vector<double> background;
};

/// Draws a scene; throws GenerationError if an object cannot be placed in
/// kPlacementAttempts tries.
SceneSpec sample_scene(std::uint64_t seed);

/// Planar [3, H, W] image with values in [0, 1].
struct Image {
    int height = 0, width = 0;
    std::vector<double> data;

    double& at(int c, int y, int x) { return data[static_cast<std::size_t>((c * height + y) * width + x)]; }
    double at(int c, int y, int x) const { return data[static_cast<std::size_t>((c * height + y) * width + x)]; }
};

/// True when pixel (x, y) (centre at x+0.5, y+0.5) lies inside the object.
bool covers(const SceneObject& object, int x, int y);

/// Tight box of the pixels the object covers.
BoundingBox shape_box(const SceneObject& object, int image_size = kSceneSize);

struct RenderedScene {
    Image image;
    std::vector<BoundingBox> boxes;  // one per object, in spec order
};

RenderedScene render_image(const SceneSpec& spec);

struct FogParams {
    double luminance = 0.8;  // L in [0.7, 0.9]
    double alpha = 0.5;      // blend in [0.4, 0.7]
    double sigma = 1.0;      // blur in [0.5, 1.5]
    double contrast = 0.75;  // in [0.6, 0.9]
};

struct FogRanges {
    double luminance_lo = 0.7, luminance_hi = 0.9;
    double alpha_lo = 0.4, alpha_hi = 0.7;
    double sigma_lo = 0.5, sigma_hi = 1.5;
    double contrast_lo = 0.6, contrast_hi = 0.9;
};

FogParams sample_fog(std::uint64_t seed, const FogRanges& ranges = {});

/// Blur, blend toward the fog luminance, scale contrast about the global mean, clip.
Image apply_fog(const Image& image, const FogParams& fog);

enum class DomainTag { Source, Target };
const char* domain_tag_name(DomainTag tag);

struct AnnotationRecord {
    std::string image;  // path relative to the dataset root
    DomainTag domain = DomainTag::Source;
    std::vector<BoundingBox> boxes;
};

struct DatasetManifest {
    std::string split;
    DomainTag domain = DomainTag::Source;
    std::vector<std::string> files;
    std::vector<AnnotationRecord> records;
    std::uint64_t seed = 0;
    FogRanges fog_ranges;
    bool fog = false;
};

inline constexpr const char* kSourceTrain = "source_train";
inline constexpr const char* kTargetTrain = "target_train";
inline constexpr const char* kTargetTest = "target_test";

struct GenerateOptions {
    int n_source_train = 400;
    int n_target_train = 400;
    int n_target_test = 100;
    /// Off only for distribution checks: target scenes are then rendered clean.
    bool fog = true;
    FogRanges fog_ranges;
};

/// The (scene, fog) seeds of image `index` in `split`.
std::uint64_t scene_seed(std::uint64_t seed, const std::string& split, int index);
std::uint64_t fog_seed(std::uint64_t seed, const std::string& split, int index);

/// Renders image `index` of a split in memory, exactly as generate_dataset writes it
/// (before 8-bit quantisation).
RenderedScene render_split_image(std::uint64_t seed, const std::string& split, int index, bool fog,
                                 const FogRanges& ranges = {});

/// Writes <root>/<split>/images/NNNNNN.ppm, <root>/<split>/annotations.jsonl and
/// <root>/manifest.json for the three splits. Returns the manifests in split order.
std::array<DatasetManifest, 3> generate_dataset(const std::filesystem::path& root, std::uint64_t seed,
                                                const GenerateOptions& options = {});

struct LoadedSplit {
    DatasetManifest manifest;
    std::vector<DetectionSample> samples;  // [3,64,64] tensors in [0,1]
};

/// Loads and validates one split. Errors name the offending file.
LoadedSplit load_dataset(const std::filesystem::path& root, const std::string& split);

void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

Tensor image_tensor(const Image& image);

}  // namespace ssada
