#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hybridlm/distill.hpp"
#include "hybridlm/gradcheck.hpp"

using namespace hybridlm;

namespace {

ModelConfig tiny_config(int L = 2, int d = 16, int heads = 4, int vocab = 13,
                        int max_seq = 64) {
    ModelConfig cfg;
    cfg.n_layers = L;
    cfg.d_model = d;
    cfg.n_heads = heads;
    cfg.vocab_size = vocab;
    cfg.max_seq_len = max_seq;
    return cfg;
}

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, bool requires_grad = false, double sd = 1.0) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), requires_grad);
    for (T& v : t.raw()) v = T(rng.normal(0.0, sd));
    return t;
}

TaskSpec small_copy_task(uint64_t seed = 3) {
    TaskSpec spec;
    spec.kind = TaskKind::copy;
    spec.vocab_size = 13;
    spec.seq_len = 14;
    spec.n_train = 128;
    spec.n_eval = 32;
    spec.seed = seed;
    return spec;
}

}  // namespace

TEST_CASE("prob loss closed-form values") {
    for (double temp : {1.0, 2.0, 5.0}) {
        Rng rng(1);
        auto z = random_tensor<double>({3, 7}, rng, false, 2.0);
        CHECK(prob_loss(z, z, temp).item() == doctest::Approx(0.0).epsilon(1e-12));
    }
    // teacher P = [0.75, 0.25], student uniform: T^2 * 0.130812...
    for (double temp : {1.0, 2.0}) {
        auto z_t = Tensor<double>::from_vector({1, 2}, {temp * std::log(3.0), 0.0});
        auto z_s = Tensor<double>::from_vector({1, 2}, {0.4, 0.4});
        const double expect = temp * temp * (0.75 * std::log(1.5) + 0.25 * std::log(0.5));
        CHECK(prob_loss(z_t, z_s, temp).item() == doctest::Approx(expect).epsilon(1e-9));
    }
}

TEST_CASE("prob loss is invariant to shifting the student logits") {
    Rng rng(2);
    auto z_t = random_tensor<double>({4, 9}, rng, false, 1.5);
    auto z_s = random_tensor<double>({4, 9}, rng, false, 1.5);
    const double base = prob_loss(z_t, z_s, 2.0).item();
    auto shifted = add(z_s, Tensor<double>::scalar(13.5));
    CHECK(prob_loss(z_t, shifted, 2.0).item() == doctest::Approx(base).epsilon(1e-9));
    CHECK(base > 0.0);
}

TEST_CASE("prob loss gradient matches finite differences and skips the teacher") {
    Rng rng(3);
    auto z_t = random_tensor<double>({2, 3, 6}, rng, true, 1.2);
    auto z_s = random_tensor<double>({2, 3, 6}, rng, true, 1.2);
    auto res = finite_difference_check<double>(
        {{"z_s", z_s, true}}, [&] { return prob_loss(z_t, z_s, 2.0); });
    CHECK(res.max_err < 1e-4);
    // teacher logits are detached: no grad flows even though they require it
    z_t.zero_grad();
    prob_loss(z_t, z_s, 2.0).backward();
    CHECK_FALSE(z_t.has_grad());
}

TEST_CASE("ce loss analytic cases and naive cross-check") {
    auto uniform = Tensor<double>::zeros({5, 8});
    std::vector<int32_t> t1{0, 3, 7, 2, 5};
    CHECK(ce_loss(uniform, t1).item() == doctest::Approx(std::log(8.0)).epsilon(1e-9));

    auto onehot = Tensor<double>::zeros({2, 4});
    onehot.raw()[size_t(0 * 4 + 2)] = 1000.0;
    onehot.raw()[size_t(1 * 4 + 1)] = 1000.0;
    CHECK(ce_loss(onehot, {2, 1}).item() == doctest::Approx(0.0).epsilon(1e-9));

    Rng rng(4);
    auto z = random_tensor<double>({6, 5}, rng, false, 2.0);
    std::vector<int32_t> targets{0, 4, kIgnoreTarget, 2, 1, 3};
    double naive = 0;
    int kept = 0;
    for (int r = 0; r < 6; ++r) {
        if (targets[size_t(r)] == kIgnoreTarget) continue;
        double denom = 0;
        for (int j = 0; j < 5; ++j) denom += std::exp(z.at({r, j}));
        naive += -std::log(std::exp(z.at({r, targets[size_t(r)]})) / denom);
        ++kept;
    }
    CHECK(ce_loss(z, targets).item() == doctest::Approx(naive / kept).epsilon(1e-9));
}

TEST_CASE("total loss weighting") {
    DistillConfig cfg;
    cfg.alpha = 1.0;
    cfg.beta = 1.0;
    cfg.gamma = 0.0;
    auto ll = Tensor<double>::scalar(0.5);
    auto lp = Tensor<double>::scalar(0.25);
    auto lc = Tensor<double>::scalar(7.0);
    CHECK(total_loss(ll, lp, lc, cfg).item() == doctest::Approx(0.75));

    cfg.alpha = 0.0;
    cfg.beta = 0.0;
    cfg.gamma = 1.0;
    CHECK(total_loss(ll, lp, lc, cfg).item() == doctest::Approx(7.0));

    cfg.alpha = 0.7;
    cfg.beta = 1.3;
    cfg.gamma = 2.0;
    const double once = total_loss(ll, lp, lc, cfg).item();
    cfg.alpha *= 2;
    cfg.beta *= 2;
    cfg.gamma *= 2;
    CHECK(total_loss(ll, lp, lc, cfg).item() == doctest::Approx(2 * once));
}

TEST_CASE("warmup stable decay schedule") {
    DistillConfig cfg;
    cfg.lr_peak = 2e-4;
    cfg.total_steps = 100;
    cfg.warmup_frac = 0.1;
    cfg.decay_frac = 0.1;
    CHECK(lr_at(0, cfg) == 0.0);
    CHECK(lr_at(10, cfg) == doctest::Approx(2e-4));
    CHECK(lr_at(50, cfg) == doctest::Approx(2e-4));
    CHECK(lr_at(89, cfg) == doctest::Approx(2e-4));
    CHECK(lr_at(99, cfg) == doctest::Approx(2e-4 / 10));
    CHECK(lr_at(99, cfg) <= 2e-4 / 10 + 1e-12);
    CHECK_THROWS_AS(lr_at(100, cfg), ContractError);
    CHECK_THROWS_AS(lr_at(-1, cfg), ContractError);
}

TEST_CASE("layer loss values") {
    Rng rng(5);
    auto cfg = tiny_config();
    auto teacher = build_teacher<double>(cfg, rng);
    Rng crng(6);
    auto plan = plan_placement(cfg.n_layers, 0.5, Placement::evenly);
    auto student = convert_model(teacher, plan, InitKind::attention_transfer, crng);

    NoGradGuard ng;
    auto x = random_tensor<double>({1, 6, cfg.d_model}, rng, false, 0.5);
    LayerTapes<double> tapes;
    tapes.positions = plan.mamba_positions;
    const int pos = plan.mamba_positions[0];
    tapes.inputs.push_back(x.detach());
    // forcing the tape output to the student's own output gives exactly zero
    auto u_student = mixer_sublayer_forward(student.layers[size_t(pos)], x);
    tapes.outputs.push_back(u_student.detach());
    CHECK(layer_loss(tapes, student).item() == doctest::Approx(0.0));

    // a 3-4-5 difference on a single token gives norm 5
    Mamba2<double> unit;
    unit.n_heads = 1;
    unit.w_x = Tensor<double>::from_vector({2, 2}, {1, 0, 0, 1});
    unit.w_b = Tensor<double>::from_vector({2, 2}, {1, 0, 0, 1});
    unit.w_c = Tensor<double>::from_vector({2, 2}, {1, 0, 0, 1});
    unit.w_o = Tensor<double>::from_vector({2, 2}, {1, 0, 0, 1});
    unit.w_dt = Tensor<double>::zeros({2, 1});
    unit.b_dt = Tensor<double>::from_vector({1}, {std::log(std::expm1(1.0))});
    unit.a_log = Tensor<double>::from_vector({1}, {0.0});
    unit.d_skip = Tensor<double>::zeros({1});
    Model<double> toy;
    toy.config = tiny_config(1, 2, 1, 4);
    toy.plan = LayerPlan{1, {0}, Placement::evenly, 1.0};
    DecoderLayer<double> layer;
    layer.mixer = unit;
    layer.norm1 = {Tensor<double>::full({2}, 1.0), Tensor<double>::zeros({2})};
    layer.norm2 = {Tensor<double>::full({2}, 1.0), Tensor<double>::zeros({2})};
    layer.mlp = {Tensor<double>::zeros({2, 8}), Tensor<double>::zeros({8}),
                 Tensor<double>::zeros({8, 2}), Tensor<double>::zeros({2})};
    toy.layers.push_back(layer);
    auto xin = Tensor<double>::from_vector({1, 1, 2}, {0.3, -0.9});
    auto u = mixer_sublayer_forward(toy.layers[0], xin);
    LayerTapes<double> tp;
    tp.positions = {0};
    tp.inputs.push_back(xin.detach());
    auto target = u.detach();
    target.raw()[0] -= 3.0;
    target.raw()[1] -= 4.0;
    tp.outputs.push_back(target);
    CHECK(layer_loss(tp, toy).item() == doctest::Approx(5.0));
    CHECK(layer_loss(tp, toy, true).item() == doctest::Approx(25.0));
}

TEST_CASE("layer loss equals direct mixer difference under equivalence dynamics") {
    Rng rng(7);
    auto cfg = tiny_config(4, 16, 4);
    auto teacher = build_teacher<double>(cfg, rng, 0.08);
    Rng crng(8);
    auto plan = plan_placement(cfg.n_layers, 0.25, Placement::evenly);
    auto student = convert_model(teacher, plan, InitKind::attention_transfer, crng);
    const int pos = plan.mamba_positions[0];
    auto& mx = student.layers[size_t(pos)].mamba();
    for (auto& v : mx.w_dt.raw()) v = 0;
    for (auto& v : mx.b_dt.raw()) v = std::log(std::expm1(1.0));
    for (auto& v : mx.a_log.raw()) v = -std::numeric_limits<double>::infinity();
    for (auto& v : mx.d_skip.raw()) v = 0;
    const double fold = 1.0 / std::sqrt(double(cfg.head_dim()));
    for (auto& v : mx.w_c.raw()) v *= fold;

    NoGradGuard ng;
    TokenBatch toks{2, 6, {1, 2, 3, 4, 5, 6, 6, 5, 4, 3, 2, 1}};
    LayerTapes<double> tapes;
    tapes.positions = plan.mamba_positions;
    model_forward(teacher, toks, nullptr, &tapes);
    const double loss = layer_loss(tapes, student).item();

    // direct evaluation of both mixers on the same normed tape inputs
    const auto& layer_t = teacher.layers[size_t(pos)];
    auto normed = layer_norm(tapes.inputs[0], layer_t.norm1.gamma, layer_t.norm1.beta);
    auto diff = sub(causal_attention(layer_t.attention(), normed),
                    softmax_free_attention_recurrent(layer_t.attention(), normed));
    const double direct = mean_all(sqrt_t(sum_last(mul(diff, diff)))).item();
    CHECK(loss == doctest::Approx(direct).epsilon(1e-9));
    CHECK(loss > 1e-6);  // softmax vs softmax-free genuinely differ
}

TEST_CASE("layer loss never sends gradient into the tapes") {
    Rng rng(9);
    auto cfg = tiny_config();
    auto teacher = build_teacher<double>(cfg, rng);
    Rng crng(10);
    auto plan = plan_placement(cfg.n_layers, 0.5, Placement::evenly);
    auto student = convert_model(teacher, plan, InitKind::attention_transfer, crng);

    LayerTapes<double> tapes;
    tapes.positions = plan.mamba_positions;
    for (int pos : plan.mamba_positions) {
        (void)pos;
        tapes.inputs.push_back(random_tensor<double>({1, 5, cfg.d_model}, rng, true, 0.5));
        tapes.outputs.push_back(random_tensor<double>({1, 5, cfg.d_model}, rng, true, 0.5));
    }
    auto loss = layer_loss(tapes, student);
    loss.backward();
    for (auto& t : tapes.inputs) CHECK_FALSE(t.has_grad());
    for (auto& t : tapes.outputs) CHECK_FALSE(t.has_grad());
    // while the student's mamba parameters did receive gradient
    CHECK(student.layers[size_t(plan.mamba_positions[0])].mamba().w_x.has_grad());
}

TEST_CASE("loss gradients through a 2-layer hybrid match finite differences") {
    Rng rng(11);
    auto cfg = tiny_config(2, 8, 2, 11, 32);
    auto teacher = build_teacher<double>(cfg, rng, 0.15);
    Rng crng(12);
    auto plan = plan_placement(cfg.n_layers, 0.5, Placement::evenly);
    auto student = convert_model(teacher, plan, InitKind::attention_transfer, crng);

    TokenBatch toks{1, 5, {1, 2, 3, 4, 5}};
    std::vector<int32_t> targets{2, 3, kIgnoreTarget, 5, 6};
    Tensor<double> teacher_logits;
    LayerTapes<double> tapes;
    tapes.positions = plan.mamba_positions;
    {
        NoGradGuard ng;
        teacher_logits = model_forward(teacher, toks, nullptr, &tapes);
    }
    std::vector<Parameter<double>> trainable;
    for (auto& p : named_parameters(student))
        if (p.trainable) trainable.push_back(p);
    REQUIRE_FALSE(trainable.empty());

    auto check = [&](const char* what, auto fn) {
        auto res = finite_difference_check<double>(trainable, fn);
        INFO(what << " worst at " << res.worst);
        CHECK(res.max_err < 1e-4);
    };
    check("prob", [&] {
        return prob_loss(teacher_logits, model_forward(student, toks), 2.0);
    });
    check("layer", [&] { return layer_loss(tapes, student); });
    check("ce", [&] { return ce_loss(model_forward(student, toks), targets); });
    DistillConfig cfg_all;
    cfg_all.alpha = 0.7;
    cfg_all.beta = 1.1;
    cfg_all.gamma = 0.4;
    check("total", [&] {
        auto logits = model_forward(student, toks);
        return total_loss(layer_loss(tapes, student), prob_loss(teacher_logits, logits, 2.0),
                          ce_loss(logits, targets), cfg_all);
    });
}

TEST_CASE("distill run: freeze contract, determinism, degenerate config") {
    kernels::set_threads(1);
    Rng rng(13);
    auto cfg = tiny_config(2, 16, 4, 13, 32);
    auto teacher = build_teacher<float>(cfg, rng);
    auto ds = gen_task(small_copy_task());

    DistillConfig dcfg;
    dcfg.total_steps = 12;
    dcfg.batch_size = 8;
    dcfg.eval_every = 6;
    dcfg.seed = 99;

    SUBCASE("gamma-only on a ratio-0 student is a no-op") {
        Rng crng(14);
        auto student = convert_model(teacher, LayerPlan::none(cfg.n_layers),
                                     InitKind::attention_transfer, crng);
        DistillConfig gcfg = dcfg;
        gcfg.alpha = 0.0;
        gcfg.beta = 0.0;
        gcfg.gamma = 1.0;
        auto before = named_parameters(student);
        std::vector<std::vector<float>> snap;
        for (auto& p : before) snap.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
        auto report = distill_run(teacher, student, ds, gcfg);
        for (auto& rec : report.steps) CHECK(rec.l_prob == doctest::Approx(0.0).epsilon(1e-6));
        auto after = named_parameters(student);
        for (size_t i = 0; i < after.size(); ++i)
            CHECK(std::equal(after[i].tensor.data().begin(), after[i].tensor.data().end(),
                             snap[i].begin()));
    }

    SUBCASE("frozen parameters are bitwise unchanged; trainable ones move") {
        Rng crng(15);
        auto plan = plan_placement(cfg.n_layers, 0.5, Placement::evenly);
        auto student = convert_model(teacher, plan, InitKind::attention_transfer, crng);
        std::vector<std::pair<std::string, std::vector<float>>> frozen_snap;
        for (auto& p : named_parameters(student))
            if (!p.trainable)
                frozen_snap.emplace_back(p.name, std::vector<float>(p.tensor.data().begin(),
                                                                    p.tensor.data().end()));
        auto report = distill_run(teacher, student, ds, dcfg);
        CHECK(report.steps.size() == 12);
        auto params = named_parameters(student);
        double moved = 0;
        for (auto& p : params) {
            if (p.trainable) {
                continue;
            }
            auto it = std::find_if(frozen_snap.begin(), frozen_snap.end(),
                                   [&](auto& q) { return q.first == p.name; });
            REQUIRE(it != frozen_snap.end());
            CHECK(std::equal(p.tensor.data().begin(), p.tensor.data().end(),
                             it->second.begin()));
        }
        for (auto& p : params)
            if (p.trainable && p.name.find("W_x") != std::string::npos)
                for (float v : p.tensor.grad()) moved += std::abs(double(v));
        // gradients were produced for trainable weights during the run
        CHECK(params.size() > frozen_snap.size());
    }

    SUBCASE("identical config and seed give identical loss series") {
        Rng c1(16), c2(16);
        auto plan = plan_placement(cfg.n_layers, 0.5, Placement::evenly);
        auto s1 = convert_model(teacher, plan, InitKind::attention_transfer, c1);
        auto s2 = convert_model(teacher, plan, InitKind::attention_transfer, c2);
        auto r1 = distill_run(teacher, s1, ds, dcfg);
        auto r2 = distill_run(teacher, s2, ds, dcfg);
        REQUIRE(r1.steps.size() == r2.steps.size());
        for (size_t i = 0; i < r1.steps.size(); ++i) {
            CHECK(r1.steps[i].total == r2.steps[i].total);
            CHECK(r1.steps[i].l_layer == r2.steps[i].l_layer);
            CHECK(r1.steps[i].l_prob == r2.steps[i].l_prob);
            CHECK(r1.steps[i].l_ce == r2.steps[i].l_ce);
        }
        CHECK(r1.final_eval_ce == r2.final_eval_ce);
    }
}

TEST_CASE("connector path: trainable, effective, and freeze-compatible") {
    kernels::set_threads(1);
    Rng rng(17);
    auto cfg = tiny_config(2, 16, 4, 13, 40);
    cfg.prefix_width = 3;
    auto teacher = build_teacher<float>(cfg, rng);
    TaskSpec spec = small_copy_task(21);
    spec.prefix_count = 2;
    spec.prefix_width = 3;
    auto ds = gen_task(spec);

    Rng crng(18);
    auto plan = plan_placement(cfg.n_layers, 0.5, Placement::evenly);
    auto student = convert_model(teacher, plan, InitKind::attention_transfer, crng);
    REQUIRE(student.connector.has_value());
    CHECK(student.connector->w.requires_grad());

    // zero prefix -> identical to the text-only path
    TokenBatch toks{1, ds.seq_len, ds.train[0].input};
    NoGradGuard* ng = nullptr;
    (void)ng;
    {
        NoGradGuard guard;
        auto no_prefix = model_forward(student, toks);
        PrefixBatch<float> empty;
        auto with_empty = model_forward(student, toks, &empty);
        CHECK(max_abs_diff(no_prefix, with_empty) == 0.0f);
    }

    DistillConfig dcfg;
    dcfg.total_steps = 3;
    dcfg.batch_size = 4;
    dcfg.eval_every = 0;
    auto w_before = std::vector<float>(student.connector->w.data().begin(),
                                       student.connector->w.data().end());
    auto report = distill_run(teacher, student, ds, dcfg);
    CHECK(report.steps.size() == 3);
    double delta = 0;
    for (size_t i = 0; i < w_before.size(); ++i)
        delta += std::abs(double(student.connector->w.data()[i]) - double(w_before[i]));
    CHECK(delta > 0.0);  // the connector actually trained
}
