#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "motionmask/numerics.hpp"
#include "motionmask/rng.hpp"
#include "motionmask/tensor.hpp"

namespace motionmask {

inline constexpr std::uint32_t kTensorFileVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "EMTF", u32 version, u32 rows, u32 cols, rows*cols little-endian f64, row-major.
std::string encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::string& bytes, const std::string& what);
void write_tensor_file(const std::string& path, const Tensor& t);
Tensor read_tensor_file(const std::string& path);

struct Checkpoint {
    std::string stage;
    std::string config;   // resolved key=value text the stage ran with
    RngState rng{};
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor& tensor(const std::string& name) const;
    bool has(const std::string& name) const;
};

/// "EMCK", u32 version, stage, config echo, RNG state, then a named tensor table.
std::string encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& what);
void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

/// Adds every value of `params` to the table as `prefix + name`.
void add_params(Checkpoint& c, const ParamSet& params, const std::string& prefix = "");
/// Overwrites each value of `params` from `prefix + name`; shapes must match.
void restore_params(const Checkpoint& c, ParamSet& params, const std::string& prefix = "");

std::string read_file(const std::string& path);
/// Writes via a temporary file and rename so readers never see a partial file.
void write_file(const std::string& path, const std::string& bytes);

} // namespace motionmask
