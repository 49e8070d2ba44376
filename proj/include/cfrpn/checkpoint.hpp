#pragma once

// Binary checkpoints of a parameter store and optional Adam state. The byte layout is
// described in docs/formats.md.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "cfrpn/adam.hpp"
#include "cfrpn/data.hpp"

namespace cfrpn {

class CheckpointError : public DataError {
public:
    using DataError::DataError;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct OptimizerState {
    AdamConfig config;
    std::uint64_t steps = 0;
    std::vector<Tensor<float>> m;
    std::vector<Tensor<float>> v;
};

struct Checkpoint {
    ParamStore<float> params;
    std::optional<OptimizerState> optimizer;
};

std::vector<std::uint8_t> encode_checkpoint(const ParamStore<float>& params, const Adam<float>* optimizer);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source = "checkpoint");

void save_checkpoint(const std::filesystem::path& path, const ParamStore<float>& params,
                     const Adam<float>* optimizer = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies checkpointed values into `params`, which must hold the same names and shapes in
/// the same order, and restores the optimizer if both sides have one.
void apply_checkpoint(const Checkpoint& ckpt, ParamStore<float>& params, Adam<float>* optimizer = nullptr);

}  // namespace cfrpn
