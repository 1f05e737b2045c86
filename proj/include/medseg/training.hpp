#pragma once

// Joint objective L = lambda_t * L_text + lambda_m * L_mask and the
// optimisation loop around it.

#include "medseg/chat.hpp"
#include "medseg/checkpoint.hpp"
#include "medseg/fileio.hpp"
#include "medseg/metrics.hpp"
#include "medseg/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <thread>
#include <vector>

namespace medseg {

struct LossWeights {
    double lambda_t = 1.0;
    double lambda_m = 1.0;
    double w_bce = 2.0;
    double w_dice = 0.5;
    double dice_eps = 1.0;

    void validate() const {
        if (lambda_t < 0 || lambda_m < 0 || w_bce < 0 || w_dice < 0 || dice_eps < 0) {
            throw InvalidArgument("loss weights must be non-negative");
        }
    }
};

/// Mean next-token cross-entropy over rows with a target >= 0.
template <class T>
ag::Var text_loss(ag::Graph<T>& g, ag::Var logits, const std::vector<int>& targets) {
    if (static_cast<Eigen::Index>(targets.size()) != g.rows(logits)) throw ShapeError("text_loss: one target per logit row");
    return g.cross_entropy(logits, targets);
}

/// Same, with an explicit supervision mask over next-token targets.
template <class T>
ag::Var text_loss(ag::Graph<T>& g, ag::Var logits, const std::vector<int>& target_ids, const std::vector<bool>& supervised) {
    if (target_ids.size() != supervised.size()) throw ShapeError("text_loss: mask length differs from targets");
    std::vector<int> t(target_ids.size(), -1);
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (supervised[i]) t[i] = target_ids[i];
    }
    return text_loss(g, logits, t);
}

/// Mean over slots of w_bce * BCE + w_dice * soft Dice; 0 for no slots.
template <class T>
ag::Var mask_loss(ag::Graph<T>& g, const std::vector<ag::Var>& logits, const std::vector<BinaryMask>& gt, const LossWeights& w) {
    if (logits.size() != gt.size()) throw ShapeError("mask_loss: prediction and target counts differ");
    if (logits.empty()) return g.input(ag::Matrix<T>::Zero(1, 1));
    std::vector<ag::Var> per;
    for (std::size_t k = 0; k < gt.size(); ++k) {
        if (g.rows(logits[k]) != static_cast<Eigen::Index>(gt[k].size()) || g.cols(logits[k]) != 1) {
            throw ShapeError("mask_loss: logit grid and mask sizes differ");
        }
        std::vector<T> y(gt[k].size());
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = gt[k].values[i] ? T(1) : T(0);
        per.push_back(g.bce_dice(logits[k], std::move(y), static_cast<T>(w.w_bce), static_cast<T>(w.w_dice),
                                 static_cast<T>(w.dice_eps)));
    }
    return g.scale(g.sum_scalars(per), T(1) / static_cast<T>(per.size()));
}

/// lambda_t * text + lambda_m * mask.
template <class T>
ag::Var combine_losses(ag::Graph<T>& g, ag::Var text, ag::Var mask, const LossWeights& w) {
    return g.add(g.scale(text, static_cast<T>(w.lambda_t)), g.scale(mask, static_cast<T>(w.lambda_m)));
}

/// A sample with its conversation flattened once up front.
struct PreparedSample {
    const Sample* sample = nullptr;
    EncodedConversation enc;
};

inline PreparedSample prepare(const Tokenizer& tok, const Sample& s) {
    PreparedSample p{&s, encode_conversation(tok, s.conversation)};
    if (p.enc.seg_positions.size() != s.masks.size()) {
        throw ShapeError("sample " + s.image_id + ": " + std::to_string(p.enc.seg_positions.size()) + " [SEG] tokens but " +
                         std::to_string(s.masks.size()) + " masks");
    }
    return p;
}

template <class T>
struct LossTerms {
    ag::Var total;
    ag::Var text;
    ag::Var mask;
    std::vector<ag::Var> mask_logits;
};

struct LossBreakdown {
    double total = 0;
    double text = 0;
    double mask = 0;
};

/// Teacher-forced forward pass for one sample.
template <class T>
LossTerms<T> sample_loss(ag::Graph<T>& g, const Model<T>& m, const PreparedSample& ps, const LossWeights& w) {
    const Sample& s = *ps.sample;
    ag::Var alpha = m.project_visual(g, m.encode_image(g, s.image));
    ag::Var states = m.llm_states(g, alpha, ps.enc.ids);
    const Eigen::Index prefix = g.rows(alpha);
    ag::Var text_states = g.slice_rows(states, prefix, static_cast<Eigen::Index>(ps.enc.ids.size()));

    // Only rows with a target need logits.
    std::vector<Eigen::Index> rows;
    std::vector<int> targets;
    for (std::size_t t = 0; t < ps.enc.targets.size(); ++t) {
        if (ps.enc.targets[t] >= 0) {
            rows.push_back(static_cast<Eigen::Index>(t));
            targets.push_back(ps.enc.targets[t]);
        }
    }
    LossTerms<T> out;
    if (rows.empty()) {
        out.text = g.input(ag::Matrix<T>::Zero(1, 1));
    } else {
        out.text = text_loss(g, m.lm_logits(g, g.gather_rows(text_states, rows)), targets);
    }

    if (!ps.enc.seg_positions.empty()) {
        std::vector<Eigen::Index> seg_rows(ps.enc.seg_positions.begin(), ps.enc.seg_positions.end());
        ag::Var prompts = m.project_prompt(g, g.gather_rows(text_states, std::move(seg_rows)));
        auto f = m.ground_encode(g, s.image);
        for (Eigen::Index k = 0; k < g.rows(prompts); ++k) out.mask_logits.push_back(m.decode_mask(g, f, g.slice_rows(prompts, k, 1)));
    }
    out.mask = mask_loss(g, out.mask_logits, s.masks, w);
    out.total = combine_losses(g, out.text, out.mask, w);
    return out;
}

/// Forward only; returns the loss breakdown.
template <class T>
LossBreakdown total_loss(const Model<T>& m, const PreparedSample& ps, const LossWeights& w) {
    ag::Graph<T> g(m.params());
    auto l = sample_loss(g, m, ps, w);
    return {static_cast<double>(g.scalar(l.total)), static_cast<double>(g.scalar(l.text)), static_cast<double>(g.scalar(l.mask))};
}

/// Mean loss over a batch; accumulates d(mean)/d(params) into `grads`.
template <class T>
LossBreakdown batch_loss_and_grad(const Model<T>& m, const std::vector<const PreparedSample*>& batch, const LossWeights& w,
                                  ag::Gradients<T>& grads, int threads = 1,
                                  ag::GradientFault fault = ag::GradientFault::none) {
    const T inv = T(1) / static_cast<T>(batch.size());
    const std::size_t nt = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1, batch.size());
    std::vector<ag::Gradients<T>> local;
    std::vector<LossBreakdown> parts(batch.size());
    for (std::size_t t = 0; t < nt; ++t) local.push_back(ag::Gradients<T>::zeros_like(m.params()));
    auto work = [&](std::size_t t) {
        // Static striping keeps the summation order fixed for a given thread count.
        for (std::size_t i = t; i < batch.size(); i += nt) {
            ag::Graph<T> g(m.params(), &local[t], fault);
            auto l = sample_loss(g, m, *batch[i], w);
            parts[i] = {static_cast<double>(g.scalar(l.total)), static_cast<double>(g.scalar(l.text)),
                        static_cast<double>(g.scalar(l.mask))};
            g.backward(g.scale(l.total, inv));
        }
    };
    if (nt == 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < nt; ++t) pool.emplace_back(work, t);
        for (auto& th : pool) th.join();
    }
    for (auto& l : local) grads += l;
    LossBreakdown mean;
    for (const auto& p : parts) {
        mean.total += p.total / static_cast<double>(batch.size());
        mean.text += p.text / static_cast<double>(batch.size());
        mean.mask += p.mask / static_cast<double>(batch.size());
    }
    return mean;
}

/// Teacher-forced DSC over every slot of the given samples (masks from
/// logits > 0); nullopt when there are no slots.
template <class T>
std::optional<double> teacher_forced_dsc(const Model<T>& m, const std::vector<PreparedSample>& data, const LossWeights& w) {
    double sum = 0;
    std::size_t n = 0;
    for (const auto& ps : data) {
        ag::Graph<T> g(m.params());
        auto l = sample_loss(g, m, ps, w);
        for (std::size_t k = 0; k < l.mask_logits.size(); ++k) {
            const auto& v = g.value(l.mask_logits[k]);
            const auto& gt = ps.sample->masks[k];
            BinaryMask pred(gt.height, gt.width);
            for (std::size_t i = 0; i < pred.size(); ++i) pred.values[i] = v(static_cast<Eigen::Index>(i), 0) > T(0) ? 1 : 0;
            sum += metrics::dsc(pred, gt);
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

struct TrainConfig {
    int steps = 1000;
    int batch_size = 4;
    double learning_rate = 3e-4;
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
    int eval_every = 50;
    std::string checkpoint_dir; // empty: no files written
    int checkpoint_every = 0;   // 0: final checkpoint only
    int warmup_steps = 0;
    bool cosine_decay = false;
    double min_lr_ratio = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    int threads = 1;

    void validate() const {
        if (steps < 0 || batch_size <= 0 || !(learning_rate > 0) || !(grad_clip > 0) || eval_every <= 0 ||
            checkpoint_every < 0 || warmup_steps < 0 || threads <= 0 || min_lr_ratio < 0 || min_lr_ratio > 1) {
            throw InvalidArgument("invalid training configuration");
        }
    }

    double lr_at(int step) const {
        double lr = learning_rate;
        if (warmup_steps > 0 && step < warmup_steps) lr *= static_cast<double>(step + 1) / warmup_steps;
        if (cosine_decay && steps > warmup_steps && step >= warmup_steps) {
            const double t = static_cast<double>(step - warmup_steps) / std::max(1, steps - warmup_steps);
            lr *= min_lr_ratio + (1 - min_lr_ratio) * 0.5 * (1 + std::cos(std::numbers::pi * t));
        }
        return lr;
    }
};

struct LogRow {
    int step = 0;
    double loss_total = 0;
    double loss_text = 0;
    double loss_mask = 0;
    std::optional<double> dsc_train;
    double lr = 0;
    double grad_norm = 0;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j{{"step", step}, {"loss_total", loss_total}, {"loss_text", loss_text}, {"loss_mask", loss_mask}};
        j["dsc_train"] = dsc_train ? nlohmann::ordered_json(*dsc_train) : nlohmann::ordered_json(nullptr);
        j["lr"] = lr;
        j["grad_norm"] = grad_norm;
        return j;
    }
};

struct TrainResult {
    std::vector<LogRow> log;
    int steps_run = 0;
};

inline constexpr const char* kMetricsLogName = "metrics.jsonl";
inline constexpr const char* kCheckpointName = "model.ckpt";
inline constexpr const char* kVocabName = "vocab.json";

/// Seed-determined sample order: consecutive reshuffled epochs.
class BatchStream {
  public:
    BatchStream(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {}

    std::vector<std::size_t> next(std::size_t batch) {
        std::vector<std::size_t> out;
        while (out.size() < batch) {
            if (pos_ == order_.size()) reshuffle();
            out.push_back(order_[pos_++]);
        }
        return out;
    }

  private:
    void reshuffle() {
        order_.resize(n_);
        for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
        auto rng = synth::sample_rng(seed_, 0x747261696eULL + epoch_++);
        // Fisher-Yates with the bit-stable helper so the order is portable.
        for (std::size_t i = n_; i > 1; --i) {
            std::swap(order_[i - 1], order_[static_cast<std::size_t>(rng() % i)]);
        }
        pos_ = 0;
    }

    std::size_t n_;
    std::uint64_t seed_;
    std::uint64_t epoch_ = 0;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

namespace detail {

template <class T>
nlohmann::json nonfinite_dump(const Model<T>& m, int step, const LossBreakdown& l, const std::vector<std::size_t>& idx,
                              const std::vector<PreparedSample>& data) {
    nlohmann::json j;
    j["step"] = step;
    auto num = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(std::to_string(x)); };
    j["loss_total"] = num(l.total);
    j["loss_text"] = num(l.text);
    j["loss_mask"] = num(l.mask);
    for (auto i : idx) j["batch"].push_back(data[i].sample->image_id);
    for (std::size_t p = 0; p < m.params().size(); ++p) {
        const auto& v = m.params().value(p);
        if (!v.allFinite()) j["nonfinite_parameters"].push_back(m.params().name(p));
    }
    return j;
}

} // namespace detail

/// Adam with global-norm clipping. Bit-reproducible in serial mode.
template <class T>
TrainResult train(Model<T>& model, const Tokenizer& tok, const std::vector<Sample>& dataset, const TrainConfig& cfg,
                  const LossWeights& w = {}, const std::function<void(const LogRow&)>& on_log = {}) {
    cfg.validate();
    w.validate();
    if (dataset.empty()) throw EmptyEvalSet("training set is empty");
    std::vector<PreparedSample> data;
    data.reserve(dataset.size());
    for (const auto& s : dataset) data.push_back(prepare(tok, s));

    namespace fs = std::filesystem;
    const bool write = !cfg.checkpoint_dir.empty();
    if (write) {
        fs::create_directories(cfg.checkpoint_dir);
        save_vocab(tok.vocab(), (fs::path(cfg.checkpoint_dir) / kVocabName).string());
        fileio::write_atomic((fs::path(cfg.checkpoint_dir) / kMetricsLogName).string(), "");
    }
    auto save = [&](int step) {
        if (!write) return;
        nlohmann::json meta{{"step", step}, {"seed", cfg.seed}};
        save_checkpoint(model, tok.vocab(), (fs::path(cfg.checkpoint_dir) / kCheckpointName).string(), meta);
    };

    auto& ps = model.params();
    auto grads = ag::Gradients<T>::zeros_like(ps);
    auto m1 = ag::Gradients<T>::zeros_like(ps);
    auto m2 = ag::Gradients<T>::zeros_like(ps);
    BatchStream stream(data.size(), cfg.seed);
    TrainResult result;
    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);

    for (int step = 0; step < cfg.steps; ++step) {
        const auto idx = stream.next(bs);
        std::vector<const PreparedSample*> batch;
        for (auto i : idx) batch.push_back(&data[i]);
        grads.set_zero();
        const LossBreakdown l = batch_loss_and_grad(model, batch, w, grads, cfg.threads);
        const double gnorm = std::sqrt(static_cast<double>(grads.squared_norm()));
        if (!std::isfinite(l.total) || !std::isfinite(gnorm)) {
            const auto dump = detail::nonfinite_dump(model, step, l, idx, data);
            if (write) fileio::write_atomic((fs::path(cfg.checkpoint_dir) / "nonfinite_dump.json").string(), dump.dump(2) + "\n");
            throw NonFiniteLoss("non-finite loss at step " + std::to_string(step) + ": " + dump.dump());
        }

        const bool log_now = step % cfg.eval_every == 0 || step == cfg.steps - 1;
        if (log_now) {
            LogRow row{step, l.total, l.text, l.mask, teacher_forced_dsc(model, data, w), cfg.lr_at(step), gnorm};
            result.log.push_back(row);
            if (write) fileio::append_line((fs::path(cfg.checkpoint_dir) / kMetricsLogName).string(), row.to_json().dump());
            if (on_log) on_log(row);
        }

        const T clip = gnorm > cfg.grad_clip ? static_cast<T>(cfg.grad_clip / gnorm) : T(1);
        const T lr = static_cast<T>(cfg.lr_at(step));
        const T b1 = static_cast<T>(cfg.beta1);
        const T b2 = static_cast<T>(cfg.beta2);
        const T c1 = T(1) / (T(1) - static_cast<T>(std::pow(cfg.beta1, step + 1)));
        const T c2 = T(1) / (T(1) - static_cast<T>(std::pow(cfg.beta2, step + 1)));
        const T eps = static_cast<T>(cfg.adam_eps);
        for (std::size_t p = 0; p < ps.size(); ++p) {
            auto g = (grads.grads[p].array() * clip).eval();
            m1.grads[p].array() = b1 * m1.grads[p].array() + (T(1) - b1) * g;
            m2.grads[p].array() = b2 * m2.grads[p].array() + (T(1) - b2) * g.square();
            ps.value(p).array() -= lr * (m1.grads[p].array() * c1) / ((m2.grads[p].array() * c2).sqrt() + eps);
        }
        result.steps_run = step + 1;
        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) save(step + 1);
    }
    save(result.steps_run);
    return result;
}

struct GradCheckResult {
    double max_rel_error = 0;
    std::size_t coordinates = 0;
    std::map<std::string, double> per_group; // max error per parameter group
};

/// Central finite differences of total_loss against the analytic gradient
/// on a random subsample of at least `min_coords` coordinates, drawn from
/// every parameter tensor.
inline GradCheckResult grad_check(Model<double>& model, const PreparedSample& sample, double epsilon, const LossWeights& w = {},
                                  std::size_t min_coords = 240, std::uint64_t seed = 0,
                                  ag::GradientFault fault = ag::GradientFault::none) {
    if (!(epsilon > 0) || !std::isfinite(epsilon)) throw InvalidArgument("grad_check epsilon must be positive");
    auto& ps = model.params();
    auto grads = ag::Gradients<double>::zeros_like(ps);
    {
        ag::Graph<double> g(ps, &grads, fault);
        g.backward(sample_loss(g, model, sample, w).total);
    }
    auto rng = synth::sample_rng(seed, 0x6772616463ULL);
    const std::size_t per_tensor = (min_coords + ps.size() - 1) / ps.size();
    GradCheckResult out;
    for (std::size_t p = 0; p < ps.size(); ++p) {
        auto& v = ps.value(p);
        const std::string group = Model<double>::group_of(ps.name(p));
        auto& worst = out.per_group[group];
        for (std::size_t k = 0; k < per_tensor; ++k) {
            const auto i = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(v.size()));
            const double keep = v.data()[i];
            v.data()[i] = keep + epsilon;
            const double up = total_loss(model, sample, w).total;
            v.data()[i] = keep - epsilon;
            const double dn = total_loss(model, sample, w).total;
            v.data()[i] = keep;
            const double num = (up - dn) / (2 * epsilon);
            const double ana = grads.grads[p].data()[i];
            const double rel = std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-6});
            worst = std::max(worst, rel);
            out.max_rel_error = std::max(out.max_rel_error, rel);
            ++out.coordinates;
        }
    }
    return out;
}

} // namespace medseg
