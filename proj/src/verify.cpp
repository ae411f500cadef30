#include "hybridlm/verify.hpp"

#include <sstream>

#include "hybridlm/distill.hpp"
#include "hybridlm/gradcheck.hpp"

namespace hybridlm {

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, bool requires_grad = false, double sd = 0.5) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), requires_grad);
    for (T& v : t.raw()) v = T(rng.normal(0.0, sd));
    return t;
}

VerifyResult check_eq4_eq5(Rng rng, int cases, float tol) {
    float worst = 0;
    for (int i = 0; i < cases; ++i) {
        const int heads = 1 << rng.below(3);
        const int d = int(heads * (1 + rng.below(8)));
        const int n = int(1 + rng.below(64));
        auto p = make_attention<float>(d, heads, rng, 0.5 / std::sqrt(double(d)));
        auto x = random_tensor<float>({n, d}, rng);
        worst = std::max(worst, max_abs_diff(softmax_free_attention_quadratic(p, x),
                                             softmax_free_attention_recurrent(p, x)));
    }
    std::ostringstream detail;
    detail << cases << " random cases, max |quadratic - recurrent| = " << worst;
    return {"linear-attention equivalence (quadratic vs recurrent)", worst < tol,
            detail.str()};
}

VerifyResult check_scan_oracle(Rng rng, int cases, float tol) {
    float worst = 0;
    for (int i = 0; i < cases; ++i) {
        const int heads = 1 << rng.below(3);
        const int d = int(heads * (1 + rng.below(6)));
        const int n = int(1 + rng.below(32));
        auto p = make_mamba<float>(d, heads, rng, 0.5 / std::sqrt(double(d)));
        auto x = random_tensor<float>({n, d}, rng);
        NoGradGuard ng;
        worst = std::max(worst,
                         max_abs_diff(mamba_mixer(p, x), selective_scan_materialized(p, x)));
    }
    std::ostringstream detail;
    detail << cases << " random cases, max |scan - materialized| = " << worst;
    return {"selective scan vs semiseparable matrix oracle", worst < tol, detail.str()};
}

VerifyResult check_equivalence_mode(Rng rng, int cases, float tol) {
    float worst = 0;
    for (int i = 0; i < cases; ++i) {
        const int heads = 1 << rng.below(3);
        const int d = int(heads * (1 + rng.below(6)));
        const int n = int(1 + rng.below(24));
        auto attn = make_attention<float>(d, heads, rng, 0.5 / std::sqrt(double(d)));
        auto p = attention_equivalence_mode(attn);
        auto x = random_tensor<float>({n, d}, rng);
        NoGradGuard ng;
        worst = std::max(worst, max_abs_diff(mamba_mixer(p, x),
                                             softmax_free_attention_recurrent(attn, x)));
    }
    std::ostringstream detail;
    detail << cases << " random layers, max |equivalence-mode - recurrent| = " << worst;
    return {"attention-to-mamba weight mapping (equivalence mode)", worst < tol,
            detail.str()};
}

VerifyResult check_gradients(Rng rng) {
    double worst = 0;
    std::string worst_at;
    auto track = [&](const std::string& what, const GradCheckResult& res) {
        if (res.max_err > worst) {
            worst = res.max_err;
            worst_at = what + " " + res.worst;
        }
    };

    {
        auto p = make_attention<double>(8, 2, rng, 0.2);
        auto x = random_tensor<double>({6, 8}, rng, true);
        auto coef = random_tensor<double>({6, 8}, rng);
        track("attention",
              finite_difference_check<double>(
                  {{"W_Q", p.w_q, true}, {"W_K", p.w_k, true}, {"W_V", p.w_v, true},
                   {"W_O", p.w_o, true}, {"x", x, true}},
                  [&] { return sum_all(mul(causal_attention(p, x), coef)); }));
    }
    {
        auto p = make_mamba<double>(6, 2, rng, 0.25);
        auto x = random_tensor<double>({2, 5, 6}, rng, true);
        auto coef = random_tensor<double>({2, 5, 6}, rng);
        track("scan",
              finite_difference_check<double>(
                  {{"W_x", p.w_x, true}, {"W_B", p.w_b, true}, {"W_C", p.w_c, true},
                   {"W_O", p.w_o, true}, {"W_dt", p.w_dt, true}, {"b_dt", p.b_dt, true},
                   {"A_log", p.a_log, true}, {"D", p.d_skip, true}, {"x", x, true}},
                  [&] { return sum_all(mul(mamba_mixer(p, x), coef)); }));
    }
    {
        ModelConfig cfg;
        cfg.n_layers = 2;
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.vocab_size = 11;
        cfg.max_seq_len = 16;
        auto teacher = build_teacher<double>(cfg, rng, 0.15);
        Rng crng = rng.stream("verify.convert");
        auto student = convert_model(teacher, plan_placement(2, 0.5, Placement::evenly),
                                     InitKind::attention_transfer, crng);
        TokenBatch toks{1, 5, {1, 2, 3, 4, 5}};
        std::vector<int32_t> targets{2, 3, 4, 5, 6};
        Tensor<double> tlogits;
        LayerTapes<double> tapes;
        tapes.positions = student.plan.mamba_positions;
        {
            NoGradGuard ng;
            tlogits = model_forward(teacher, toks, nullptr, &tapes);
        }
        // randomize the tape targets: transfer init makes the first token's
        // outputs nearly coincide, and the sqrt curvature at a near-zero
        // distance would dominate the finite-difference error
        for (auto& t : tapes.outputs) t = random_tensor<double>(t.shape(), rng);
        std::vector<Parameter<double>> trainable;
        for (auto& p : named_parameters(student))
            if (p.trainable) trainable.push_back(p);
        track("prob_loss", finite_difference_check<double>(trainable, [&] {
                  return prob_loss(tlogits, model_forward(student, toks), 2.0);
              }));
        track("layer_loss", finite_difference_check<double>(
                                trainable, [&] { return layer_loss(tapes, student); }));
        track("ce_loss", finite_difference_check<double>(trainable, [&] {
                  return ce_loss(model_forward(student, toks), targets);
              }));
        // full model, all parameters trainable
        set_all_trainable(student, true);
        track("hybrid_forward", finite_difference_check<double>(
                                    named_parameters(student), [&] {
                                        return ce_loss(model_forward(student, toks), targets);
                                    }));
    }
    std::ostringstream detail;
    detail << "max relative error " << worst << " at " << worst_at;
    return {"finite-difference gradient checks (float64)", worst < 1e-4, detail.str()};
}

}  // namespace

std::vector<VerifyResult> run_verify_suites(uint64_t seed) {
    Rng root(seed);
    std::vector<VerifyResult> results;
    results.push_back(check_eq4_eq5(root.stream("verify.eq45"), 100, 1e-5f));
    results.push_back(check_scan_oracle(root.stream("verify.scan"), 100, 1e-5f));
    results.push_back(check_equivalence_mode(root.stream("verify.equiv"), 50, 1e-5f));
    results.push_back(check_gradients(root.stream("verify.grad")));
    return results;
}

}  // namespace hybridlm
