#include "cfrpn/train.hpp"

#include <chrono>
#include <cmath>
#include <exception>
#include <thread>

#include "cfrpn/ops.hpp"

namespace cfrpn {

namespace {

// Runs fn(i) for i in [0, n) on up to `threads` workers. Callers store results by index,
// so the outcome never depends on scheduling.
template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const std::size_t workers = std::min(threads, n);
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

void accumulate(GradientMap<float>& into, GradientMap<float>&& from) {
    for (auto& [id, g] : from) {
        auto it = into.find(id);
        if (it == into.end()) {
            into.emplace(id, std::move(g));
            continue;
        }
        auto dst = it->second.data();
        const auto src = g.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
}

Tensor<float> slice_batch(const Tensor<float>& images, std::size_t lo, std::size_t hi) {
    const Shape& s = images.shape();
    Tensor<float> out(Shape{hi - lo, s.c, s.h, s.w});
    std::copy_n(images.data().data() + lo * s.per_sample(), out.size(), out.data().data());
    return out;
}

}  // namespace

void TrainConfig::validate() const {
    adam.validate();
    if (batch_size == 0) throw std::invalid_argument("train: batch size must be >= 1");
    if (eval_every == 0) throw std::invalid_argument("train: eval cadence must be >= 1");
    if (eval_batch_size == 0) throw std::invalid_argument("train: eval batch size must be >= 1");
    if (threads == 0) throw std::invalid_argument("train: need at least one thread");
    augment.validate();
}

DepthStats depth_stats(std::span<const std::size_t> depths, std::size_t converged) {
    DepthStats s;
    s.samples = depths.size();
    s.converged = converged;
    if (depths.empty()) return s;
    double sum = 0.0;
    s.min = depths[0];
    s.max = depths[0];
    for (std::size_t d : depths) {
        sum += static_cast<double>(d);
        s.min = std::min(s.min, d);
        s.max = std::max(s.max, d);
    }
    s.mean = sum / static_cast<double>(depths.size());
    double var = 0.0;
    for (std::size_t d : depths) var += (static_cast<double>(d) - s.mean) * (static_cast<double>(d) - s.mean);
    s.stddev = std::sqrt(var / static_cast<double>(depths.size()));
    return s;
}

std::optional<std::string> check_traces(const ForwardTraces& traces, const ArchitectureConfig& config) {
    for (std::size_t s = 0; s < kStages; ++s) {
        if (!traces.stages[s]) continue;
        const std::size_t cap = config.mode == Mode::fixed_unroll ? config.unroll_depth
                                                                   : config.convergence.max_iterations;
        for (std::size_t i = 0; i < traces.stages[s]->samples.size(); ++i) {
            const SampleTrace& t = traces.stages[s]->samples[i];
            if (t.t_star > cap || t.t_star == 0) {
                return "stage " + std::to_string(s + 1) + " sample " + std::to_string(i) + " ran " +
                       std::to_string(t.t_star) + " iterations (cap " + std::to_string(cap) + ")";
            }
            if (t.reason == StopReason::converged && !(t.final_distance() < config.convergence.epsilon)) {
                return "stage " + std::to_string(s + 1) + " sample " + std::to_string(i) +
                       " marked converged with distance " + std::to_string(t.final_distance());
            }
        }
    }
    return std::nullopt;
}

std::vector<int> argmax_rows(const Tensor<float>& logits) {
    const std::size_t K = logits.shape().per_sample();
    std::vector<int> out(logits.shape().n);
    for (std::size_t n = 0; n < out.size(); ++n) {
        const auto row = logits.sample(n);
        std::size_t best = 0;
        for (std::size_t k = 1; k < K; ++k) {
            if (row[k] > row[best]) best = k;
        }
        out[n] = static_cast<int>(best);
    }
    return out;
}

Trainer::Trainer(Model<float>& model, const TrainConfig& config)
    : model_(&model), config_(config), adam_(config.adam) {
    config_.validate();
}

Trainer::ShardResult Trainer::run_shard(const Batch& batch, std::size_t lo, std::size_t hi,
                                        std::uint64_t step_index) const {
    const std::size_t B = batch.labels.size();
    Tape<float> tape;
    const NodeId input = tape.constant(lo == 0 && hi == B ? batch.images : slice_batch(batch.images, lo, hi));
    ForwardOptions opts;
    opts.training = true;
    for (std::size_t i = lo; i < hi; ++i) opts.sample_seeds.push_back(derive_seed(config_.seed, {0xd0, step_index, batch.ids[i]}));
    const auto fwd = model_->forward(tape, input, opts);
    std::vector<int> labels(batch.labels.begin() + static_cast<std::ptrdiff_t>(lo),
                            batch.labels.begin() + static_cast<std::ptrdiff_t>(hi));
    const NodeId loss = ops::softmax_cross_entropy(tape, fwd.logits, labels);
    ShardResult r;
    const double mean = tape.value(loss)[0];
    if (!std::isfinite(mean)) throw TrainingDiverged("training loss is non-finite at step " + std::to_string(step_index));
    r.loss_sum = mean * static_cast<double>(hi - lo);
    const auto pred = argmax_rows(tape.value(fwd.logits));
    for (std::size_t i = 0; i < pred.size(); ++i) r.correct += pred[i] == labels[i] ? 1 : 0;
    r.violation = check_traces(fwd.traces, model_->config());
    // mean over the shard, reweighted so the merged gradient is the mean over the batch
    r.grads = tape.backward(loss, static_cast<float>(static_cast<double>(hi - lo) / static_cast<double>(B)));
    return r;
}

StepResult Trainer::step(const Batch& batch) {
    const std::size_t B = batch.labels.size();
    if (B == 0) throw std::invalid_argument("train: empty batch");
    if (batch.images.shape().n != B || batch.ids.size() != B) throw ShapeError("train: batch parts disagree in size");
    const std::size_t shard = config_.shard_size == 0 ? B : std::min(config_.shard_size, B);
    const std::size_t shards = (B + shard - 1) / shard;
    const std::uint64_t step_index = adam_.steps();
    std::vector<ShardResult> parts(shards);
    try {
        parallel_for(shards, config_.threads, [&](std::size_t s) {
            parts[s] = run_shard(batch, s * shard, std::min(B, (s + 1) * shard), step_index);
        });
    } catch (const TrainingDiverged&) {
        throw;
    } catch (const NumericError& e) {
        throw TrainingDiverged(std::string(e.what()) + " at step " + std::to_string(step_index));
    }
    StepResult out;
    out.samples = B;
    GradientMap<float> grads;
    for (auto& p : parts) {
        out.loss += p.loss_sum;
        out.correct += p.correct;
        if (p.violation && !trace_violation_) trace_violation_ = p.violation;
        accumulate(grads, std::move(p.grads));
    }
    out.loss /= static_cast<double>(B);
    try {
        adam_.step(model_->params(), grads);
    } catch (const NumericError& e) {
        throw TrainingDiverged(e.what());
    }
    return out;
}

EvalResult Trainer::evaluate(const Dataset& data, const Normalizer* normalizer) const {
    EvalResult r;
    r.samples = data.size();
    if (data.size() == 0) return r;
    BatchOptions bo;
    bo.batch_size = config_.eval_batch_size;
    bo.shuffle = false;
    bo.normalizer = normalizer;
    const BatchSequence seq(data, bo);

    struct Part {
        double loss_sum = 0.0;
        std::vector<int> pred;
        ForwardTraces traces;
    };
    std::vector<Part> parts(seq.size());
    parallel_for(seq.size(), config_.threads, [&](std::size_t b) {
        const Batch batch = seq[b];
        Tape<float> tape;
        const auto fwd = model_->forward(tape, tape.constant(batch.images));
        const auto xent = kernels::softmax_cross_entropy(tape.value(fwd.logits), batch.labels);
        parts[b].loss_sum = static_cast<double>(xent.loss) * static_cast<double>(batch.labels.size());
        parts[b].pred = argmax_rows(tape.value(fwd.logits));
        parts[b].traces = fwd.traces;
    });

    std::size_t correct = 0;
    double loss = 0.0;
    std::array<std::vector<std::size_t>, kStages> depths;
    std::array<std::size_t, kStages> converged{};
    std::size_t offset = 0;
    for (const auto& p : parts) {
        loss += p.loss_sum;
        for (std::size_t i = 0; i < p.pred.size(); ++i) {
            r.predictions.push_back(p.pred[i]);
            correct += p.pred[i] == data.labels[offset + i] ? 1 : 0;
        }
        offset += p.pred.size();
        for (std::size_t s = 0; s < kStages; ++s) {
            if (!p.traces.stages[s]) continue;
            for (const auto& t : p.traces.stages[s]->samples) {
                depths[s].push_back(t.t_star);
                converged[s] += t.reason == StopReason::converged ? 1 : 0;
            }
        }
    }
    r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    r.mean_loss = loss / static_cast<double>(data.size());
    for (std::size_t s = 0; s < kStages; ++s) {
        if (model_->config().stage_recursive(s)) r.depth[s] = depth_stats(depths[s], converged[s]);
    }
    return r;
}

EpochMetrics Trainer::train_epoch(const Dataset& train, const Normalizer* normalizer, std::size_t epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    BatchOptions bo;
    bo.batch_size = config_.batch_size;
    bo.seed = config_.seed;
    bo.epoch = epoch;
    bo.training = true;
    bo.augment = config_.augment;
    bo.normalizer = normalizer;
    const BatchSequence seq(train, bo);
    double loss = 0.0;
    std::size_t correct = 0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < seq.size(); ++b) {
        const StepResult s = step(seq[b]);
        loss += s.loss * static_cast<double>(s.samples);
        correct += s.correct;
        seen += s.samples;
    }
    EpochMetrics m;
    m.epoch = epoch + 1;
    m.train_loss = seen ? loss / static_cast<double>(seen) : 0.0;
    m.train_acc = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return m;
}

std::vector<EpochMetrics> Trainer::fit(const Dataset& train, const Dataset* val, const Normalizer* normalizer,
                                       const EpochCallback& on_epoch) {
    if (train.size() == 0) throw std::invalid_argument("train: empty training set");
    std::vector<EpochMetrics> history;
    for (std::size_t e = 0; e < config_.epochs; ++e) {
        const auto t0 = std::chrono::steady_clock::now();
        EpochMetrics m = train_epoch(train, normalizer, e);
        const bool last = e + 1 == config_.epochs;
        if (val && (last || (e + 1) % config_.eval_every == 0)) m.val = evaluate(*val, normalizer);
        m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (on_epoch) on_epoch(m);
        history.push_back(std::move(m));
    }
    return history;
}

}  // namespace cfrpn
