#include "ssada/data.hpp"

#include <algorithm>
#include <cmath>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ssada/random.hpp"

namespace ssada {

namespace fs = std::filesystem;
using nlohmann::json;

const char* shape_class_name(ShapeClass cls) {
    switch (cls) {
        case ShapeClass::Disk: return "disk";
        case ShapeClass::Square: return "square";
        case ShapeClass::Triangle: return "triangle";
    }
    return "unknown";
}

const char* domain_tag_name(DomainTag tag) { return tag == DomainTag::Source ? "source" : "target"; }

SceneSpec sample_scene(std::uint64_t seed) {
    SplitMix64 rng(seed);
    SceneSpec spec;
    spec.seed = seed;
    spec.size = kSceneSize;
    spec.background.resize(3 * kNoiseGrid * kNoiseGrid);
    for (auto& v : spec.background) v = rng.uniform(0.0, kBackgroundMax);

    const auto count = static_cast<int>(rng.uniform_int(kMinObjects, kMaxObjects));
    for (int n = 0; n < count; ++n) {
        SceneObject object;
        object.cls = static_cast<ShapeClass>(rng.uniform_int(0, kShapeClasses - 1));
        object.scale = static_cast<int>(rng.uniform_int(kMinScale, kMaxScale));
        bool placed = false;
        for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
            object.cx = static_cast<int>(rng.uniform_int(object.scale, spec.size - object.scale));
            object.cy = static_cast<int>(rng.uniform_int(object.scale, spec.size - object.scale));
            placed = std::all_of(spec.objects.begin(), spec.objects.end(), [&](const SceneObject& other) {
                return std::hypot(object.cx - other.cx, object.cy - other.cy) >= kMinCenterDistance;
            });
        }
        if (!placed) {
            throw GenerationError("scene " + std::to_string(seed) + ": could not place object " + std::to_string(n) +
                                  " after " + std::to_string(kPlacementAttempts) + " attempts");
        }
        for (auto& c : object.color) c = rng.uniform(kColorMin, 1.0);
        spec.objects.push_back(object);
    }
    return spec;
}

bool covers(const SceneObject& o, int x, int y) {
    // Doubled coordinates keep every test in integers: pixel centre = (2x+1, 2y+1).
    const int px = 2 * x + 1 - 2 * o.cx;
    const int py = 2 * y + 1 - 2 * o.cy;
    const int r2 = 2 * o.scale;
    switch (o.cls) {
        case ShapeClass::Disk: return px * px + py * py <= r2 * r2;
        case ShapeClass::Square: return std::abs(px) <= r2 && std::abs(py) <= r2;
        case ShapeClass::Triangle: return py <= r2 && 2 * std::abs(px) <= py + r2;
    }
    return false;
}

BoundingBox shape_box(const SceneObject& object, int image_size) {
    int x1 = image_size, y1 = image_size, x2 = -1, y2 = -1;
    const int lo_x = std::max(0, object.cx - object.scale - 1), hi_x = std::min(image_size - 1, object.cx + object.scale);
    const int lo_y = std::max(0, object.cy - object.scale - 1), hi_y = std::min(image_size - 1, object.cy + object.scale);
    for (int y = lo_y; y <= hi_y; ++y) {
        for (int x = lo_x; x <= hi_x; ++x) {
            if (!covers(object, x, y)) continue;
            x1 = std::min(x1, x);
            y1 = std::min(y1, y);
            x2 = std::max(x2, x);
            y2 = std::max(y2, y);
        }
    }
    if (x2 < 0) throw GenerationError("object covers no pixels");
    return {static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(x2 + 1), static_cast<double>(y2 + 1),
            static_cast<int>(object.cls), 1.0};
}

RenderedScene render_image(const SceneSpec& spec) {
    if (spec.size <= 0 || spec.background.size() != static_cast<std::size_t>(3 * kNoiseGrid * kNoiseGrid)) {
        throw GenerationError("invalid scene spec");
    }
    RenderedScene out;
    Image& img = out.image;
    img.height = img.width = spec.size;
    img.data.assign(static_cast<std::size_t>(3 * spec.size * spec.size), 0.0);

    const double step = static_cast<double>(kNoiseGrid - 1) / spec.size;
    for (int y = 0; y < spec.size; ++y) {
        const double v = (y + 0.5) * step;
        const int v0 = std::min(static_cast<int>(v), kNoiseGrid - 2);
        const double fv = v - v0;
        for (int x = 0; x < spec.size; ++x) {
            const double u = (x + 0.5) * step;
            const int u0 = std::min(static_cast<int>(u), kNoiseGrid - 2);
            const double fu = u - u0;
            for (int c = 0; c < 3; ++c) {
                const double* g = spec.background.data() + c * kNoiseGrid * kNoiseGrid;
                const double top = (1 - fu) * g[v0 * kNoiseGrid + u0] + fu * g[v0 * kNoiseGrid + u0 + 1];
                const double bottom = (1 - fu) * g[(v0 + 1) * kNoiseGrid + u0] + fu * g[(v0 + 1) * kNoiseGrid + u0 + 1];
                img.at(c, y, x) = (1 - fv) * top + fv * bottom;
            }
        }
    }

    for (const auto& object : spec.objects) {
        const BoundingBox box = shape_box(object, spec.size);
        for (int y = static_cast<int>(box.y1); y < static_cast<int>(box.y2); ++y) {
            for (int x = static_cast<int>(box.x1); x < static_cast<int>(box.x2); ++x) {
                if (!covers(object, x, y)) continue;
                for (int c = 0; c < 3; ++c) img.at(c, y, x) = object.color[static_cast<std::size_t>(c)];
            }
        }
        out.boxes.push_back(box);
    }
    return out;
}

FogParams sample_fog(std::uint64_t seed, const FogRanges& r) {
    SplitMix64 rng(seed);
    FogParams fog;
    fog.luminance = rng.uniform(r.luminance_lo, r.luminance_hi);
    fog.alpha = rng.uniform(r.alpha_lo, r.alpha_hi);
    fog.sigma = rng.uniform(r.sigma_lo, r.sigma_hi);
    fog.contrast = rng.uniform(r.contrast_lo, r.contrast_hi);
    return fog;
}

namespace {

std::vector<double> gaussian_kernel(double sigma) {
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        total += k[static_cast<std::size_t>(i + radius)];
    }
    for (auto& w : k) w /= total;
    return k;
}

// Separable blur with replicated borders.
Image blur(const Image& in, double sigma) {
    const auto k = gaussian_kernel(sigma);
    const int radius = static_cast<int>(k.size() / 2);
    Image tmp = in, out = in;
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < in.height; ++y) {
            for (int x = 0; x < in.width; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    acc += k[static_cast<std::size_t>(i + radius)] * in.at(c, y, std::clamp(x + i, 0, in.width - 1));
                }
                tmp.at(c, y, x) = acc;
            }
        }
        for (int y = 0; y < in.height; ++y) {
            for (int x = 0; x < in.width; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    acc += k[static_cast<std::size_t>(i + radius)] * tmp.at(c, std::clamp(y + i, 0, in.height - 1), x);
                }
                out.at(c, y, x) = acc;
            }
        }
    }
    return out;
}

constexpr double kMinBlurSigma = 1e-3;

}  // namespace

Image apply_fog(const Image& image, const FogParams& fog) {
    Image out = fog.sigma >= kMinBlurSigma ? blur(image, fog.sigma) : image;
    double mean = 0.0;
    for (auto& v : out.data) {
        v = (1.0 - fog.alpha) * v + fog.alpha * fog.luminance;
        mean += v;
    }
    if (!out.data.empty()) mean /= static_cast<double>(out.data.size());
    for (auto& v : out.data) v = std::clamp(mean + fog.contrast * (v - mean), 0.0, 1.0);
    return out;
}

std::uint64_t scene_seed(std::uint64_t seed, const std::string& split, int index) {
    return derive_seed(derive_seed(seed, split), static_cast<std::uint64_t>(index));
}

std::uint64_t fog_seed(std::uint64_t seed, const std::string& split, int index) {
    return derive_seed(scene_seed(seed, split, index), "fog");
}

RenderedScene render_split_image(std::uint64_t seed, const std::string& split, int index, bool fog,
                                 const FogRanges& ranges) {
    RenderedScene scene = render_image(sample_scene(scene_seed(seed, split, index)));
    if (fog) scene.image = apply_fog(scene.image, sample_fog(fog_seed(seed, split, index), ranges));
    return scene;
}

void write_ppm(const fs::path& path, const Image& image) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataIoError("cannot open " + path.string() + " for writing");
    out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
    std::string bytes(static_cast<std::size_t>(3 * image.width * image.height), '\0');
    std::size_t k = 0;
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                const double v = std::clamp(image.at(c, y, x), 0.0, 1.0);
                bytes[k++] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
            }
        }
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataIoError("failed writing " + path.string());
}

Image read_ppm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataLoadError("missing image file " + path.string());
    auto token = [&]() {
        std::string t;
        char ch;
        while (in.get(ch)) {
            if (ch == '#') {
                std::string comment;
                std::getline(in, comment);
                continue;
            }
            if (std::isspace(static_cast<unsigned char>(ch))) {
                if (!t.empty()) break;
                continue;
            }
            t.push_back(ch);
        }
        return t;
    };
    const std::string magic = token();
    if (magic != "P6") throw DataLoadError("image " + path.string() + " is not a binary PPM (P6)");
    int width = 0, height = 0, maxval = 0;
    try {
        width = std::stoi(token());
        height = std::stoi(token());
        maxval = std::stoi(token());
    } catch (const std::exception&) {
        throw DataLoadError("malformed PPM header in " + path.string());
    }
    if (width <= 0 || height <= 0 || maxval != 255) {
        throw DataLoadError("unsupported PPM geometry in " + path.string());
    }
    std::string bytes(static_cast<std::size_t>(3 * width * height), '\0');
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
        throw DataLoadError("truncated image file " + path.string());
    }
    Image img;
    img.width = width;
    img.height = height;
    img.data.resize(bytes.size());
    std::size_t k = 0;
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<unsigned char>(bytes[k++]) / 255.0;
        }
    }
    return img;
}

Tensor image_tensor(const Image& image) {
    return Tensor::from_values({3, image.height, image.width}, image.data);
}

namespace {

json box_json(const BoundingBox& b) {
    return {{"x1", b.x1}, {"y1", b.y1}, {"x2", b.x2}, {"y2", b.y2}, {"class", b.cls}};
}

json ranges_json(const FogRanges& r) {
    return {{"luminance", {r.luminance_lo, r.luminance_hi}},
            {"alpha", {r.alpha_lo, r.alpha_hi}},
            {"sigma", {r.sigma_lo, r.sigma_hi}},
            {"contrast", {r.contrast_lo, r.contrast_hi}}};
}

FogRanges ranges_from_json(const json& j) {
    FogRanges r;
    r.luminance_lo = j.at("luminance").at(0);
    r.luminance_hi = j.at("luminance").at(1);
    r.alpha_lo = j.at("alpha").at(0);
    r.alpha_hi = j.at("alpha").at(1);
    r.sigma_lo = j.at("sigma").at(0);
    r.sigma_hi = j.at("sigma").at(1);
    r.contrast_lo = j.at("contrast").at(0);
    r.contrast_hi = j.at("contrast").at(1);
    return r;
}

std::string image_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06d.ppm", index);
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataIoError("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw DataIoError("failed writing " + path.string());
}

}  // namespace

std::array<DatasetManifest, 3> generate_dataset(const fs::path& root, std::uint64_t seed,
                                                const GenerateOptions& options) {
    struct SplitPlan {
        const char* name;
        DomainTag domain;
        int count;
    };
    const SplitPlan plans[3] = {{kSourceTrain, DomainTag::Source, options.n_source_train},
                                {kTargetTrain, DomainTag::Target, options.n_target_train},
                                {kTargetTest, DomainTag::Target, options.n_target_test}};
    for (const auto& plan : plans) {
        if (plan.count < 1) throw std::invalid_argument(std::string("split ") + plan.name + " needs at least one image");
    }

    std::array<DatasetManifest, 3> manifests;
    json splits = json::object();
    try {
        for (std::size_t s = 0; s < 3; ++s) {
            const SplitPlan& plan = plans[s];
            DatasetManifest& m = manifests[s];
            m.split = plan.name;
            m.domain = plan.domain;
            m.seed = seed;
            m.fog_ranges = options.fog_ranges;
            m.fog = options.fog && plan.domain == DomainTag::Target;
            fs::create_directories(root / plan.name / "images");

            std::string jsonl;
            for (int i = 0; i < plan.count; ++i) {
                const RenderedScene scene = render_split_image(seed, plan.name, i, m.fog, options.fog_ranges);
                const std::string rel = std::string(plan.name) + "/images/" + image_name(i);
                write_ppm(root / rel, scene.image);
                AnnotationRecord record{rel, plan.domain, scene.boxes};
                json boxes = json::array();
                for (const auto& b : record.boxes) boxes.push_back(box_json(b));
                jsonl += json{{"image", rel}, {"domain", domain_tag_name(plan.domain)}, {"boxes", boxes}}.dump() + "\n";
                m.files.push_back(rel);
                m.records.push_back(std::move(record));
            }
            write_text(root / plan.name / "annotations.jsonl", jsonl);
            splits[plan.name] = {{"domain", domain_tag_name(plan.domain)},
                                 {"count", plan.count},
                                 {"fog", m.fog},
                                 {"annotations", std::string(plan.name) + "/annotations.jsonl"},
                                 {"files", m.files}};
        }
        const json manifest = {
            {"seed", seed},
            {"counts",
             {{kSourceTrain, options.n_source_train},
              {kTargetTrain, options.n_target_train},
              {kTargetTest, options.n_target_test}}},
            {"image_size", kSceneSize},
            {"classes", {"disk", "square", "triangle"}},
            {"scene",
             {{"objects", {kMinObjects, kMaxObjects}},
              {"scale", {kMinScale, kMaxScale}},
              {"min_center_distance", kMinCenterDistance},
              {"background", {0.0, kBackgroundMax}},
              {"color", {kColorMin, 1.0}}}},
            {"fog_ranges", ranges_json(options.fog_ranges)},
            {"splits", splits}};
        write_text(root / "manifest.json", manifest.dump(2) + "\n");
    } catch (const fs::filesystem_error& e) {
        throw DataIoError(std::string("cannot write dataset: ") + e.what());
    }
    return manifests;
}

namespace {

BoundingBox parse_box(const json& j, const std::string& where) {
    BoundingBox b;
    try {
        b.x1 = j.at("x1").get<double>();
        b.y1 = j.at("y1").get<double>();
        b.x2 = j.at("x2").get<double>();
        b.y2 = j.at("y2").get<double>();
        b.cls = j.at("class").get<int>();
    } catch (const json::exception& e) {
        throw DataLoadError(where + ": malformed box: " + e.what());
    }
    if (b.cls < 0 || b.cls >= kShapeClasses) {
        throw DataLoadError(where + ": unknown class id " + std::to_string(b.cls));
    }
    if (!b.valid() || b.x1 < 0 || b.y1 < 0 || b.x2 > kSceneSize || b.y2 > kSceneSize) {
        throw DataLoadError(where + ": box violates x1<x2, y1<y2 inside [0," + std::to_string(kSceneSize) + "]");
    }
    return b;
}

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataLoadError("missing file " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataLoadError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

}  // namespace

LoadedSplit load_dataset(const fs::path& root, const std::string& split) {
    const fs::path manifest_path = root / "manifest.json";
    const json manifest = read_json_file(manifest_path);
    LoadedSplit out;
    DatasetManifest& m = out.manifest;
    json entry;
    fs::path annotations;
    try {
        if (!manifest.at("splits").contains(split)) {
            throw DataLoadError(manifest_path.string() + " has no split '" + split + "'");
        }
        entry = manifest.at("splits").at(split);
        m.split = split;
        m.seed = manifest.at("seed").get<std::uint64_t>();
        m.fog_ranges = ranges_from_json(manifest.at("fog_ranges"));
        m.fog = entry.at("fog").get<bool>();
        const auto domain = entry.at("domain").get<std::string>();
        if (domain != "source" && domain != "target") {
            throw DataLoadError(manifest_path.string() + ": unknown domain '" + domain + "'");
        }
        m.domain = domain == "source" ? DomainTag::Source : DomainTag::Target;
        m.files = entry.at("files").get<std::vector<std::string>>();
        annotations = root / entry.at("annotations").get<std::string>();
    } catch (const json::exception& e) {
        throw DataLoadError("malformed manifest " + manifest_path.string() + ": " + e.what());
    }

    std::ifstream in(annotations);
    if (!in) throw DataLoadError("missing annotation file " + annotations.string());
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = annotations.string() + ":" + std::to_string(line_no);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataLoadError(where + ": malformed record: " + e.what());
        }
        AnnotationRecord record;
        try {
            record.image = j.at("image").get<std::string>();
            const auto domain = j.at("domain").get<std::string>();
            if (domain != domain_tag_name(m.domain)) {
                throw DataLoadError(where + ": domain '" + domain + "' does not match split " + split);
            }
            record.domain = m.domain;
            for (const auto& b : j.at("boxes")) record.boxes.push_back(parse_box(b, where));
        } catch (const json::exception& e) {
            throw DataLoadError(where + ": malformed record: " + e.what());
        }
        m.records.push_back(std::move(record));
    }
    if (m.records.size() != m.files.size()) {
        throw DataLoadError(annotations.string() + " has " + std::to_string(m.records.size()) +
                            " records but the manifest lists " + std::to_string(m.files.size()) + " images");
    }
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        if (m.records[i].image != m.files[i]) {
            throw DataLoadError(annotations.string() + ": record " + std::to_string(i + 1) + " names " +
                                m.records[i].image + " but the manifest lists " + m.files[i]);
        }
        const Image img = read_ppm(root / m.files[i]);
        if (img.width != kSceneSize || img.height != kSceneSize) {
            throw DataLoadError("image " + (root / m.files[i]).string() + " is not " + std::to_string(kSceneSize) +
                                "x" + std::to_string(kSceneSize));
        }
        out.samples.push_back({image_tensor(img), m.records[i].boxes});
    }
    return out;
}

}  // namespace ssada
