#include "motionmask/io.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "motionmask/errors.hpp"

namespace motionmask {

namespace {

constexpr char kTensorMagic[4] = {'E', 'M', 'T', 'F'};
constexpr char kCheckpointMagic[4] = {'E', 'M', 'C', 'K'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
    }
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
    }
}

void put_string(std::string& out, const std::string& s) {
    put_u64(out, s.size());
    out += s;
}

void put_values(std::string& out, const Tensor& t) {
    for (double v : t.flat()) {
        put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
}

void put_shape(std::string& out, const Tensor& t, const std::string& what) {
    if (t.rows() > 0xffffffffu || t.cols() > 0xffffffffu) {
        throw DimensionError(what + ": tensor too large for a u32 shape");
    }
    put_u32(out, static_cast<std::uint32_t>(t.rows()));
    put_u32(out, static_cast<std::uint32_t>(t.cols()));
}

class Reader {
public:
    Reader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) {
            throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_));
        }
    }
    void magic(const char (&expected)[4]) {
        need(4);
        if (std::memcmp(bytes_.data() + pos_, expected, 4) != 0) {
            throw FormatError(what_ + ": bad magic, expected " + std::string(expected, 4));
        }
        pos_ += 4;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += 8;
        return v;
    }
    std::string string() {
        const std::uint64_t n = u64();
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    Tensor tensor() {
        const std::uint32_t rows = u32();
        const std::uint32_t cols = u32();
        need(static_cast<std::size_t>(rows) * cols * 8);
        Tensor t(rows, cols);
        for (double& v : t.flat()) {
            v = std::bit_cast<double>(u64());
        }
        return t;
    }
    void version(std::uint32_t expected) {
        const std::uint32_t v = u32();
        if (v != expected) {
            throw FormatError(what_ + ": format version " + std::to_string(v) + " is not supported (expected " +
                              std::to_string(expected) + ")");
        }
    }
    void finish() const {
        if (pos_ != bytes_.size()) {
            throw FormatError(what_ + ": " + std::to_string(bytes_.size() - pos_) + " trailing bytes");
        }
    }

private:
    const std::string& bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

} // namespace

std::string encode_tensor(const Tensor& t) {
    std::string out(kTensorMagic, 4);
    put_u32(out, kTensorFileVersion);
    put_shape(out, t, "tensor file");
    put_values(out, t);
    return out;
}

Tensor decode_tensor(const std::string& bytes, const std::string& what) {
    Reader r(bytes, what);
    r.magic(kTensorMagic);
    r.version(kTensorFileVersion);
    Tensor t = r.tensor();
    r.finish();
    return t;
}

void write_tensor_file(const std::string& path, const Tensor& t) { write_file(path, encode_tensor(t)); }

Tensor read_tensor_file(const std::string& path) { return decode_tensor(read_file(path), path); }

const Tensor& Checkpoint::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) {
            return t;
        }
    }
    throw FormatError("checkpoint '" + stage + "' has no tensor '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& entry : tensors) {
        if (entry.first == name) {
            return true;
        }
    }
    return false;
}

std::string encode_checkpoint(const Checkpoint& c) {
    std::string out(kCheckpointMagic, 4);
    put_u32(out, kCheckpointVersion);
    put_string(out, c.stage);
    put_string(out, c.config);
    put_u64(out, c.rng.seed);
    put_u64(out, c.rng.counter);
    put_u32(out, static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& [name, t] : c.tensors) {
        put_string(out, name);
        put_shape(out, t, "checkpoint tensor " + name);
        put_values(out, t);
    }
    return out;
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& what) {
    Reader r(bytes, what);
    r.magic(kCheckpointMagic);
    r.version(kCheckpointVersion);
    Checkpoint c;
    c.stage = r.string();
    c.config = r.string();
    c.rng.seed = r.u64();
    c.rng.counter = r.u64();
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.string();
        Tensor t = r.tensor();
        c.tensors.emplace_back(std::move(name), std::move(t));
    }
    r.finish();
    return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& c) { write_file(path, encode_checkpoint(c)); }

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path), path); }

void add_params(Checkpoint& c, const ParamSet& params, const std::string& prefix) {
    for (const auto& [name, p] : params) {
        c.tensors.emplace_back(prefix + name, p.value);
    }
}

void restore_params(const Checkpoint& c, ParamSet& params, const std::string& prefix) {
    for (auto& [name, p] : params) {
        const Tensor& t = c.tensor(prefix + name);
        if (t.rows() != p.value.rows() || t.cols() != p.value.cols()) {
            throw FormatError("checkpoint '" + c.stage + "': tensor " + prefix + name + " is " + t.shape_string() +
                              ", model expects " + p.value.shape_string());
        }
        p.value = t;
    }
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open " + path);
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

void write_file(const std::string& path, const std::string& bytes) {
    const std::filesystem::path target(path);
    if (target.has_parent_path()) {
        std::filesystem::create_directories(target.parent_path());
    }
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw FormatError("cannot write " + tmp);
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw FormatError("short write to " + tmp);
        }
    }
    std::filesystem::rename(tmp, target);
}

} // namespace motionmask
