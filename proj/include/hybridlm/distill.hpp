#pragma once

// The three-term distillation loss, the warmup-stable-decay schedule, AdamW,
// and the single-stage training loop. Only the student's Mamba mixers and the
// connector ever receive updates; the teacher runs with grads disabled.

#include <chrono>
#include <cmath>

#include "hybridlm/data.hpp"
#include "hybridlm/hybrid.hpp"
#include "hybridlm/model.hpp"

namespace hybridlm {

struct DistillConfig {
    double alpha = 1.0;   // layer-wise loss weight
    double beta = 1.0;    // probability-distribution loss weight
    double gamma = 0.0;   // sequence cross-entropy weight
    double temperature = 2.0;
    bool layer_loss_squared = false;

    double lr_peak = 2e-4;
    double warmup_frac = 0.1;
    double decay_frac = 0.1;
    double weight_decay = 0.01;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.95;

    int batch_size = 16;
    int total_steps = 400;
    int eval_every = 20;
    uint64_t seed = 1;

    void validate() const {
        if (alpha < 0 || beta < 0 || gamma < 0)
            throw InputError("distill config: loss weights must be nonnegative");
        if (alpha == 0 && beta == 0 && gamma == 0)
            throw InputError("distill config: at least one loss weight must be positive");
        if (temperature <= 0) throw InputError("distill config: temperature must be > 0");
        if (warmup_frac < 0 || decay_frac < 0 || warmup_frac + decay_frac > 1.0)
            throw InputError("distill config: warmup_frac + decay_frac must be <= 1");
        if (batch_size < 1 || total_steps < 1)
            throw InputError("distill config: batch_size and total_steps must be >= 1");
    }
};

// Warmup-stable-decay: linear 0 -> lr_peak over the warmup span, flat at
// lr_peak, then linear lr_peak -> 0 over the final decay span.
inline double lr_at(int step, const DistillConfig& c) {
    if (step < 0 || step >= c.total_steps)
        throw ContractError("lr_at: step " + std::to_string(step) + " out of range");
    const int warmup = int(std::llround(c.warmup_frac * c.total_steps));
    const int decay = int(std::llround(c.decay_frac * c.total_steps));
    if (step < warmup) return c.lr_peak * double(step) / double(warmup);
    if (step >= c.total_steps - decay)
        return c.lr_peak * double(c.total_steps - step) / double(decay);
    return c.lr_peak;
}

// ---------------------------------------------------------------------------
// losses

// T^2 * KL(P_t || P_s) with temperature-softened distributions, averaged over
// batch and sequence positions. The teacher side is detached.
template <typename T>
Tensor<T> prob_loss(const Tensor<T>& z_t, const Tensor<T>& z_s, double temperature) {
    if (temperature <= 0) throw ContractError("prob_loss: temperature must be > 0");
    if (z_t.shape() != z_s.shape())
        throw DimError("prob_loss: logit shapes disagree, " + shape_str(z_t.shape()) +
                       " vs " + shape_str(z_s.shape()));
    const int v = z_t.dim(-1);
    const int64_t rows = z_t.numel() / v;
    Tensor<T> log_pt, pt;
    {
        NoGradGuard ng;
        log_pt = log_softmax(scale(z_t.detach(), 1.0 / temperature));
        pt = exp_t(log_pt);
    }
    Tensor<T> log_ps = log_softmax(scale(z_s, 1.0 / temperature));
    Tensor<T> kl = mul(pt, sub(log_pt, log_ps));
    return scale(sum_all(kl), temperature * temperature / double(rows));
}

// Sum over planned positions of the mean per-token L2 norm between the
// teacher's mixer sub-block output and the student's, with the student fed
// the teacher's hidden state entering that layer. Tapes are detached; no
// gradient ever reaches them.
template <typename T>
Tensor<T> layer_loss(const LayerTapes<T>& tapes, const Model<T>& student,
                     bool squared = false) {
    if (tapes.positions != student.plan.mamba_positions)
        throw ContractError("layer_loss: tape positions do not match the student plan");
    if (tapes.inputs.size() != tapes.positions.size() ||
        tapes.outputs.size() != tapes.positions.size())
        throw ContractError("layer_loss: incomplete tapes");
    Tensor<T> total = Tensor<T>::scalar(T(0));
    for (size_t i = 0; i < tapes.positions.size(); ++i) {
        const int pos = tapes.positions[i];
        Tensor<T> x = tapes.inputs[i].detach();
        Tensor<T> target = tapes.outputs[i].detach();
        if (x.shape() != target.shape())
            throw ContractError("layer_loss: tape shapes disagree");
        Tensor<T> u = mixer_sublayer_forward(student.layers[size_t(pos)], x);
        Tensor<T> diff = sub(u, target);
        Tensor<T> per_token = sum_last(mul(diff, diff));
        if (!squared) per_token = sqrt_t(per_token);
        total = add(total, mean_all(per_token));
    }
    return total;
}

template <typename T>
Tensor<T> ce_loss(const Tensor<T>& logits, const std::vector<int32_t>& targets) {
    return cross_entropy(logits, targets);
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& l_layer, const Tensor<T>& l_prob, const Tensor<T>& l_ce,
                     const DistillConfig& c) {
    return add(add(scale(l_layer, c.alpha), scale(l_prob, c.beta)), scale(l_ce, c.gamma));
}

// ---------------------------------------------------------------------------
// optimizer

template <typename T>
class AdamW {
public:
    AdamW(std::vector<Parameter<T>> params, double beta1, double beta2, double weight_decay,
          double eps = 1e-8)
        : b1_(beta1), b2_(beta2), wd_(weight_decay), eps_(eps) {
        for (auto& p : params) {
            if (!p.trainable) continue;
            Slot s;
            s.param = p.tensor;
            s.m.assign(size_t(p.tensor.numel()), T(0));
            s.v.assign(size_t(p.tensor.numel()), T(0));
            slots_.push_back(std::move(s));
        }
    }

    size_t trainable_tensors() const { return slots_.size(); }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, double(t_));
        const double bc2 = 1.0 - std::pow(b2_, double(t_));
        for (auto& s : slots_) {
            if (!s.param.has_grad()) continue;
            auto g = s.param.grad();
            auto w = s.param.raw();
            for (int64_t i = 0; i < int64_t(w.size()); ++i) {
                const double gi = double(g[size_t(i)]);
                s.m[size_t(i)] = T(b1_ * double(s.m[size_t(i)]) + (1.0 - b1_) * gi);
                s.v[size_t(i)] = T(b2_ * double(s.v[size_t(i)]) + (1.0 - b2_) * gi * gi);
                const double mhat = double(s.m[size_t(i)]) / bc1;
                const double vhat = double(s.v[size_t(i)]) / bc2;
                w[size_t(i)] = T(double(w[size_t(i)]) -
                                 lr * (mhat / (std::sqrt(vhat) + eps_) +
                                       wd_ * double(w[size_t(i)])));
            }
        }
    }

    void zero_grad() {
        for (auto& s : slots_) s.param.zero_grad();
    }

private:
    struct Slot {
        Tensor<T> param;
        std::vector<T> m, v;
    };
    std::vector<Slot> slots_;
    double b1_, b2_, wd_, eps_;
    int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// evaluation

struct EvalResult {
    double ce = 0.0;
    double accuracy = 0.0;
};

template <typename T>
PrefixBatch<T> to_prefix_batch(const Batch& b) {
    PrefixBatch<T> p;
    p.count = b.prefix_count;
    p.width = b.prefix_width;
    p.feats.assign(b.prefix.begin(), b.prefix.end());
    return p;
}

// Targets aligned to the (prefix + tokens) axis: prefix positions are ignored.
inline std::vector<int32_t> padded_targets(const Batch& b) {
    if (b.prefix_count == 0) return b.targets;
    std::vector<int32_t> out;
    out.reserve(size_t(b.toks.batch) * size_t(b.prefix_count + b.toks.n));
    for (int bi = 0; bi < b.toks.batch; ++bi) {
        out.insert(out.end(), size_t(b.prefix_count), kIgnoreTarget);
        out.insert(out.end(), b.targets.begin() + int64_t(bi) * b.toks.n,
                   b.targets.begin() + int64_t(bi + 1) * b.toks.n);
    }
    return out;
}

template <typename T>
EvalResult evaluate_model(const Model<T>& m, const Dataset& ds, int batch_size = 64) {
    NoGradGuard ng;
    double ce_sum = 0.0;
    int64_t ce_count = 0, correct = 0;
    for (size_t start = 0; start < ds.eval_set.size(); start += size_t(batch_size)) {
        std::vector<const Example*> picks;
        for (size_t i = start; i < std::min(ds.eval_set.size(), start + size_t(batch_size));
             ++i)
            picks.push_back(&ds.eval_set[i]);
        Batch b = assemble_batch(ds, picks);
        PrefixBatch<T> prefix = to_prefix_batch<T>(b);
        auto logits = model_forward(m, b.toks, prefix.count > 0 ? &prefix : nullptr);
        const auto targets = padded_targets(b);
        const int v = m.config.vocab_size;
        const int64_t rows = logits.numel() / v;
        const T* pl = logits.data().data();
        for (int64_t r = 0; r < rows; ++r) {
            const int32_t y = targets[size_t(r)];
            if (y == kIgnoreTarget) continue;
            const T* row = pl + r * v;
            T mx = row[0];
            int arg = 0;
            for (int j = 1; j < v; ++j)
                if (row[j] > mx) {
                    mx = row[j];
                    arg = j;
                }
            T sum = 0;
            for (int j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
            ce_sum += double(mx + std::log(sum) - row[y]);
            correct += arg == y ? 1 : 0;
            ++ce_count;
        }
    }
    if (ce_count == 0) throw ContractError("evaluate_model: no scored positions");
    return {ce_sum / double(ce_count), double(correct) / double(ce_count)};
}

// ---------------------------------------------------------------------------
// training loops and reports

struct StepRecord {
    int step = 0;
    double lr = 0, l_layer = 0, l_prob = 0, l_ce = 0, total = 0;
};

struct EvalRecord {
    int step = 0;
    double eval_ce = 0;
};

struct TrainingReport {
    std::vector<StepRecord> steps;
    std::vector<EvalRecord> evals;
    double final_eval_ce = 0;
    double final_eval_accuracy = 0;
    double wall_clock_s = 0;
};

// Single-stage distillation: teacher forward (no grad) produces logits and
// layer tapes; the student's own forward gives the logits for the KL and CE
// terms; the layer loss feeds teacher-forced inputs through the student's
// Mamba layers. All three components are computed and logged every step even
// when their weight is zero.
template <typename T>
TrainingReport distill_run(const Model<T>& teacher, Model<T>& student, const Dataset& ds,
                           const DistillConfig& cfg) {
    cfg.validate();
    if (student.config != teacher.config)
        throw ContractError("distill_run: student and teacher configs differ");
    if (ds.vocab != teacher.config.vocab_size)
        throw ContractError("distill_run: dataset vocab does not match the model");

    const auto t0 = std::chrono::steady_clock::now();
    Rng root(cfg.seed);
    Batcher batcher(ds, cfg.batch_size, root.stream("batches"));
    AdamW<T> opt(named_parameters(student), cfg.adam_beta1, cfg.adam_beta2,
                 cfg.weight_decay);

    TrainingReport report;
    for (int step = 0; step < cfg.total_steps; ++step) {
        Batch batch = batcher.next();
        PrefixBatch<T> prefix = to_prefix_batch<T>(batch);
        PrefixBatch<T>* pfx = prefix.count > 0 ? &prefix : nullptr;
        const auto targets = padded_targets(batch);

        Tensor<T> teacher_logits;
        LayerTapes<T> tapes;
        tapes.positions = student.plan.mamba_positions;
        {
            NoGradGuard ng;
            teacher_logits = model_forward(teacher, batch.toks, pfx, &tapes);
        }

        Tensor<T> student_logits = model_forward(student, batch.toks, pfx);
        Tensor<T> l_prob = prob_loss(teacher_logits, student_logits, cfg.temperature);
        Tensor<T> l_layer = layer_loss(tapes, student, cfg.layer_loss_squared);
        Tensor<T> l_ce = ce_loss(student_logits, targets);
        Tensor<T> total = total_loss(l_layer, l_prob, l_ce, cfg);

        if (!all_finite(total) || !all_finite(l_layer) || !all_finite(l_prob) ||
            !all_finite(l_ce))
            throw ContractError("distill_run: non-finite loss at step " +
                                std::to_string(step) + " (L_layer=" +
                                std::to_string(double(l_layer.item())) + ", L_prob=" +
                                std::to_string(double(l_prob.item())) + ", L_ce=" +
                                std::to_string(double(l_ce.item())) + ")");

        const double lr = lr_at(step, cfg);
        total.backward();
        opt.step(lr);
        opt.zero_grad();

        report.steps.push_back({step, lr, double(l_layer.item()), double(l_prob.item()),
                                double(l_ce.item()), double(total.item())});
        if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0)
            report.evals.push_back({step + 1, evaluate_model(student, ds).ce});
    }
    EvalResult final_eval = evaluate_model(student, ds);
    report.final_eval_ce = final_eval.ce;
    report.final_eval_accuracy = final_eval.accuracy;
    report.wall_clock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

// Plain LM training for the teacher: cross entropy on the task targets, all
// parameters trainable, same optimizer and schedule machinery. A positive
// stop_eval_ce ends the run at the first eval checkpoint at or below it
// (used to pin fixture teachers at a target quality).
template <typename T>
TrainingReport train_lm(Model<T>& model, const Dataset& ds, const DistillConfig& cfg,
                        double stop_eval_ce = 0.0) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    Rng root(cfg.seed);
    Batcher batcher(ds, cfg.batch_size, root.stream("batches"));
    set_all_trainable(model, true);
    AdamW<T> opt(named_parameters(model), cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay);

    TrainingReport report;
    for (int step = 0; step < cfg.total_steps; ++step) {
        Batch batch = batcher.next();
        PrefixBatch<T> prefix = to_prefix_batch<T>(batch);
        PrefixBatch<T>* pfx = prefix.count > 0 ? &prefix : nullptr;
        Tensor<T> logits = model_forward(model, batch.toks, pfx);
        Tensor<T> loss = ce_loss(logits, padded_targets(batch));
        if (!all_finite(loss))
            throw ContractError("train_lm: non-finite loss at step " + std::to_string(step));
        const double lr = lr_at(step, cfg);
        loss.backward();
        opt.step(lr);
        opt.zero_grad();
        report.steps.push_back({step, lr, 0.0, 0.0, double(loss.item()), double(loss.item())});
        if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            report.evals.push_back({step + 1, evaluate_model(model, ds).ce});
            if (stop_eval_ce > 0.0 && report.evals.back().eval_ce <= stop_eval_ce) break;
        }
    }
    EvalResult final_eval = evaluate_model(model, ds);
    report.final_eval_ce = final_eval.ce;
    report.final_eval_accuracy = final_eval.accuracy;
    report.wall_clock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

}  // namespace hybridlm
