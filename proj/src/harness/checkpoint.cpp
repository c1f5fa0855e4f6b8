#include <bit>
#include <cstring>
#include <fstream>

#include "ssada/harness.hpp"

namespace ssada {

namespace {

constexpr char kMagic[8] = {'S', 'S', 'A', 'D', 'A', 'C', 'K', 'P'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    Reader(std::string bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

    const char* take(std::size_t n) {
        if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint " + path_ + " is truncated");
        const char* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }

    std::uint64_t uint(int width) {
        const char* p = take(static_cast<std::size_t>(width));
        std::uint64_t v = 0;
        for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
        return v;
    }

    std::string text(std::size_t n) { return std::string(take(n), n); }
    bool done() const { return pos_ == bytes_.size(); }
    const std::string& path() const { return path_; }

private:
    std::string bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TrainConfig& config, const ParameterList& params) {
    std::string out(kMagic, sizeof kMagic);
    put_u32(out, kCheckpointVersion);
    const std::string text = format_config(config);
    put_u64(out, text.size());
    out += text;
    put_u32(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        put_u32(out, static_cast<std::uint32_t>(p.name.size()));
        out += p.name;
        put_u32(out, static_cast<std::uint32_t>(p.tensor.rank()));
        for (auto extent : p.tensor.shape()) put_u64(out, static_cast<std::uint64_t>(extent));
        for (double v : p.tensor.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
    // Write then rename so an interrupted save never clobbers the previous good file.
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw CheckpointError("cannot open " + tmp + " for writing");
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw CheckpointError("failed writing " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r(std::move(bytes), path.string());

    if (std::memcmp(r.take(sizeof kMagic), kMagic, sizeof kMagic) != 0) {
        throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
    }
    const auto version = r.uint(4);
    if (version != kCheckpointVersion) {
        throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint ck;
    ck.config = parse_config(r.text(r.uint(8)));
    const auto count = r.uint(4);
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = r.text(r.uint(4));
        const auto ndim = r.uint(4);
        Shape shape;
        for (std::uint64_t d = 0; d < ndim; ++d) shape.push_back(static_cast<std::int64_t>(r.uint(8)));
        std::vector<double> values(shape_numel(shape));
        for (auto& v : values) v = std::bit_cast<double>(r.uint(8));
        if (!ck.parameters.emplace(name, std::make_pair(std::move(shape), std::move(values))).second) {
            throw CheckpointError(path.string() + ": duplicate parameter '" + name + "'");
        }
    }
    if (!r.done()) throw CheckpointError(path.string() + ": trailing bytes after the last parameter");
    return ck;
}

void restore_parameters(const Checkpoint& checkpoint, const ParameterList& params) {
    for (const auto& p : params) {
        const auto it = checkpoint.parameters.find(p.name);
        if (it == checkpoint.parameters.end()) throw CheckpointError("checkpoint lacks parameter '" + p.name + "'");
        if (it->second.first != p.tensor.shape()) {
            throw CheckpointError("checkpoint parameter '" + p.name + "' has shape " + shape_string(it->second.first) +
                                  ", model expects " + shape_string(p.tensor.shape()));
        }
        Tensor t = p.tensor;
        const auto dst = t.mutable_values();
        std::copy(it->second.second.begin(), it->second.second.end(), dst.begin());
    }
}

}  // namespace ssada
