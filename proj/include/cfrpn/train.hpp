#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "cfrpn/adam.hpp"
#include "cfrpn/data.hpp"
#include "cfrpn/model.hpp"

namespace cfrpn {

/// Raised when the training loss or a gradient turns non-finite. The parameters and
/// optimizer state are those from before the failing step.
class TrainingDiverged : public NumericError {
public:
    using NumericError::NumericError;
};

struct TrainConfig {
    AdamConfig adam;
    std::size_t batch_size = 128;
    std::size_t epochs = 30;
    std::uint64_t seed = 0;
    /// Evaluate on the validation set every this many epochs (and always after the last).
    std::size_t eval_every = 1;
    /// Samples per forward/backward shard; 0 processes each batch whole. Gradients are
    /// merged in shard order, so results depend on this value but not on `threads`.
    std::size_t shard_size = 0;
    std::size_t threads = 1;
    std::size_t eval_batch_size = 256;
    AugmentPolicy augment;

    void validate() const;
};

struct DepthStats {
    double mean = 0.0;
    double stddev = 0.0;
    std::size_t min = 0;
    std::size_t max = 0;
    std::size_t samples = 0;
    std::size_t converged = 0;
};

DepthStats depth_stats(std::span<const std::size_t> depths, std::size_t converged = 0);

struct EvalResult {
    double accuracy = 0.0;
    double mean_loss = 0.0;
    std::size_t samples = 0;
    /// Present for recursive stages only.
    std::array<std::optional<DepthStats>, kStages> depth;
    std::vector<int> predictions;
};

struct StepResult {
    double loss = 0.0;
    std::size_t correct = 0;
    std::size_t samples = 0;
};

struct EpochMetrics {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double train_acc = 0.0;
    std::optional<EvalResult> val;
    double wall_seconds = 0.0;
};

/// Every trace of every recursive stage obeys the stopping rule: no depth above the cap and
/// every converged sample's last distance is below epsilon. Returns a description of the
/// first violation, or nothing.
std::optional<std::string> check_traces(const ForwardTraces& traces, const ArchitectureConfig& config);

class Trainer {
public:
    Trainer(Model<float>& model, const TrainConfig& config);

    /// One optimizer step on `batch` (normalization already applied). Dropout masks are
    /// seeded from (seed, step index, sample id).
    StepResult step(const Batch& batch);

    /// Inference mode, in dataset order.
    EvalResult evaluate(const Dataset& data, const Normalizer* normalizer = nullptr) const;

    /// One pass over `train` in the seeded order for `epoch` (0-based).
    EpochMetrics train_epoch(const Dataset& train, const Normalizer* normalizer, std::size_t epoch);

    using EpochCallback = std::function<void(const EpochMetrics&)>;
    std::vector<EpochMetrics> fit(const Dataset& train, const Dataset* val, const Normalizer* normalizer,
                                  const EpochCallback& on_epoch = {});

    Adam<float>& optimizer() noexcept { return adam_; }
    const Adam<float>& optimizer() const noexcept { return adam_; }
    Model<float>& model() noexcept { return *model_; }
    const TrainConfig& config() const noexcept { return config_; }

    /// Whether any trace observed during training violated the stopping rule.
    const std::optional<std::string>& trace_violation() const noexcept { return trace_violation_; }

private:
    struct ShardResult {
        GradientMap<float> grads;
        double loss_sum = 0.0;
        std::size_t correct = 0;
        std::optional<std::string> violation;
    };
    ShardResult run_shard(const Batch& batch, std::size_t lo, std::size_t hi, std::uint64_t step_index) const;

    Model<float>* model_;
    TrainConfig config_;
    Adam<float> adam_;
    std::optional<std::string> trace_violation_;
};

/// argmax over each row of a [N, K, 1, 1] logits tensor; ties go to the lower class.
std::vector<int> argmax_rows(const Tensor<float>& logits);

}  // namespace cfrpn
