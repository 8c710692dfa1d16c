#include <cmath>
#include <random>

#include "doctest.h"
#include "elat/attacks.hpp"
#include "elat/data.hpp"
#include "elat/energy.hpp"
#include "elat/ops.hpp"
#include "support.hpp"

using namespace elat;
using namespace elat::attacks;

namespace {

constexpr double kEps = 8.0 / 255.0;

struct Batch {
    Tensor x;
    std::vector<std::size_t> y;
};

Batch take(const Dataset& d, std::size_t n) {
    std::vector<std::size_t> idx(std::min(n, d.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return {d.batch(idx), d.batch_labels(idx)};
}

// Moons model trained to a curved boundary; shared by the sweep tests.
const Classifier& trained_moons() {
    static const Classifier model = [] {
        auto m = Classifier::build(ArchDescriptor::parse("mlp(2,32,32,2)"), 3);
        elat::testing::fit_clean(m, make_moons(200, 0.1, 1), 600, 0.5);
        return m;
    }();
    return model;
}

std::vector<double> per_sample(const Classifier& model, const Tensor& x,
                               const std::function<Tensor(const Tensor&)>& f) {
    NoGradGuard ng;
    auto v = f(model.logits(x));
    return {v.data().begin(), v.data().end()};
}

std::vector<double> ce_values(const Classifier& m, const Tensor& x, std::span<const std::size_t> y) {
    return per_sample(m, x, [&](const Tensor& z) { return energy::cross_entropy(z, y); });
}

double max_dev(const Tensor& a, const Tensor& b) { return elat::testing::max_abs_diff(a.data(), b.data()); }

bool in_unit_box(const Tensor& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](double v) { return v >= 0.0 && v <= 1.0; });
}

Tensor add_uniform(const Tensor& x, double radius, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(-radius, radius);
    std::vector<double> v(x.data().begin(), x.data().end());
    for (auto& e : v) e = std::clamp(e + u(rng), 0.0, 1.0);
    return Tensor::from(x.shape(), v);
}

Classifier zero_model(const std::string& arch) {
    auto m = Classifier::build(ArchDescriptor::parse(arch), 1);
    for (auto& p : m.parameters()) {
        for (auto& v : p.value.mutable_data()) v = 0.0;
    }
    return m;
}

}  // namespace

TEST_CASE("FGSM on a linear model follows the analytic logistic gradient") {
    auto model = Classifier::build(ArchDescriptor::parse("mlp(2,2)"), 1);
    auto params = model.parameters();
    // z = x W + b with W [in,out]
    const std::vector<double> w{0.7, -0.4, -1.1, 0.9};
    std::copy(w.begin(), w.end(), params[0].value.mutable_data().begin());
    const std::vector<double> x0{0.4, 0.6};
    const std::size_t y = 0;
    const double z0 = x0[0] * w[0] + x0[1] * w[2], z1 = x0[0] * w[1] + x0[1] * w[3];
    const double p0 = 1.0 / (1.0 + std::exp(z1 - z0)), p1 = 1.0 - p0;
    // dCE/dx_j = sum_k W[j,k] (p_k - 1[k==y])
    const double g0 = w[0] * (p0 - 1.0) + w[1] * p1;
    const double g1 = w[2] * (p0 - 1.0) + w[3] * p1;
    auto spec = AttackSpec::defaults(AttackKind::fgsm, 0.1);
    std::vector<std::size_t> labels{y};
    auto adv = fgsm(model, Tensor::from({1, 2}, x0), labels, spec);
    REQUIRE(g0 < 0.0);
    REQUIRE(g1 > 0.0);
    CHECK(adv[0] == doctest::Approx(x0[0] - 0.1).epsilon(1e-15));
    CHECK(adv[1] == doctest::Approx(x0[1] + 0.1).epsilon(1e-15));
}

TEST_CASE("FGSM degenerate cases") {
    auto flat = zero_model("mlp(2,3,2)");
    std::vector<std::size_t> y{1};
    const Tensor x = Tensor::from({1, 2}, {0.3, 0.9});
    auto spec = AttackSpec::defaults(AttackKind::fgsm, 0.1);
    auto same = fgsm(flat, x, y, spec);
    CHECK(same[0] == 0.3);
    CHECK(same[1] == 0.9);

    auto model = Classifier::build(ArchDescriptor::parse("mlp(1,2)"), 1);
    auto w = model.parameters()[0].value.mutable_data();
    w[0] = -1.0;  // dCE/dx > 0 for y = 0
    w[1] = 1.0;
    std::vector<std::size_t> y0{0};
    auto edge = fgsm(model, Tensor::from({1, 1}, {1.0}), y0, spec);
    CHECK(edge[0] == 1.0);
}

TEST_CASE("RS-FGSM with zero step is the clipped random start") {
    const auto& model = trained_moons();
    auto b = take(make_moons(50, 0.1, 2), 50);
    auto spec = AttackSpec::defaults(AttackKind::rs_fgsm, kEps);
    spec.alpha = 0.0;
    Rng rng(11);
    auto adv = rs_fgsm(model, b.x, b.y, spec, rng);
    CHECK(max_dev(adv, add_uniform(b.x, kEps, 11)) == 0.0);
}

TEST_CASE("stochastic attacks are deterministic under a fixed seed") {
    const auto& model = trained_moons();
    auto b = take(make_moons(40, 0.1, 3), 40);
    for (auto kind : {AttackKind::rs_fgsm, AttackKind::n_fgsm, AttackKind::pgd, AttackKind::pgd_kl,
                      AttackKind::cw_margin}) {
        auto spec = AttackSpec::defaults(kind, kEps);
        spec.restarts = 2;
        if (spec.single_step()) spec.restarts = 1;
        Rng r1(5), r2(5);
        auto a = run_attack(model, b.x, b.y, spec, r1);
        auto c = run_attack(model, b.x, b.y, spec, r2);
        CHECK(max_dev(a, c) == 0.0);
    }
}

TEST_CASE("box constraints hold for every kind over a 1000-sample sweep") {
    const auto& model = trained_moons();
    auto b = take(make_moons(1000, 0.2, 4), 1000);
    for (auto kind : {AttackKind::fgsm, AttackKind::rs_fgsm, AttackKind::n_fgsm, AttackKind::pgd,
                      AttackKind::pgd_kl, AttackKind::pgd_targeted, AttackKind::cw_margin}) {
        auto spec = AttackSpec::defaults(kind, kEps);
        Rng rng(6);
        auto adv = run_attack(model, b.x, b.y, spec, rng);
        const double bound = kind == AttackKind::n_fgsm ? spec.n_fgsm_k * kEps + kEps : kEps;
        INFO(to_string(kind));
        CHECK(max_dev(adv, b.x) <= bound + 1e-12);
        CHECK(in_unit_box(adv));
    }
}

TEST_CASE("N-FGSM deviation approaches k*eps + eps") {
    const auto& model = trained_moons();
    Rng gen(7);
    std::uniform_real_distribution<double> u(0.2, 0.8);
    std::vector<double> v(2000);
    for (auto& e : v) e = u(gen);
    const Tensor x = Tensor::from({1000, 2}, v);
    std::vector<std::size_t> y(1000);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = i % 2;
    auto spec = AttackSpec::defaults(AttackKind::n_fgsm, kEps);
    Rng rng(8);
    auto adv = n_fgsm(model, x, y, spec, rng);
    const double bound = 3.0 * kEps;
    CHECK(max_dev(adv, x) <= bound + 1e-12);
    CHECK(max_dev(adv, x) > 0.97 * bound);
    CHECK(max_dev(adv, x) > kEps);  // deliberately not projected to the eps-ball
}

TEST_CASE("PGD projects onto the eps box") {
    auto model = Classifier::build(ArchDescriptor::parse("mlp(1,2)"), 1);
    auto w = model.parameters()[0].value.mutable_data();
    w[0] = -1.0;
    w[1] = 1.0;
    std::vector<std::size_t> y{0};
    auto spec = AttackSpec::defaults(AttackKind::pgd, 0.1);
    spec.steps = 1;
    spec.alpha = 0.25;
    spec.random_start = false;
    Rng rng(1);
    auto adv = pgd(model, Tensor::from({1, 1}, {0.5}), y, spec, rng);
    CHECK(adv[0] == doctest::Approx(0.6).epsilon(1e-15));
}

TEST_CASE("one-step PGD without random start is FGSM bit for bit") {
    const auto& model = trained_moons();
    auto b = take(make_moons(300, 0.2, 9), 300);
    for (double lambda : {0.0, 1.5}) {
        auto f = AttackSpec::defaults(AttackKind::fgsm, kEps);
        f.he_lambda = lambda;
        auto p = AttackSpec::defaults(AttackKind::pgd, kEps);
        p.steps = 1;
        p.alpha = kEps;
        p.random_start = false;
        p.he_lambda = lambda;
        Rng rng(1);
        auto a = fgsm(model, b.x, b.y, f);
        auto c = pgd(model, b.x, b.y, p, rng);
        CHECK(std::equal(a.data().begin(), a.data().end(), c.data().begin()));
    }
}

TEST_CASE("PGD raises CE on a trained model") {
    const auto& model = trained_moons();
    auto b = take(make_moons(400, 0.1, 10), 400);
    auto spec = AttackSpec::defaults(AttackKind::pgd, 0.05);
    spec.steps = 20;
    Rng rng(2);
    auto adv = pgd(model, b.x, b.y, spec, rng);
    auto before = ce_values(model, b.x, b.y), after = ce_values(model, adv, b.y);
    std::size_t up = 0;
    for (std::size_t i = 0; i < before.size(); ++i) up += after[i] >= before[i];
    CHECK(double(up) / before.size() >= 0.95);
}

TEST_CASE("restarts keep the per-sample best iterate") {
    const auto& model = trained_moons();
    auto b = take(make_moons(200, 0.1, 12), 200);
    auto one = AttackSpec::defaults(AttackKind::pgd, 0.05);
    one.steps = 3;
    auto many = one;
    many.restarts = 4;
    Rng r1(3), r2(3);
    auto single = pgd(model, b.x, b.y, one, r1);
    auto multi = pgd(model, b.x, b.y, many, r2);
    auto a = ce_values(model, single, b.y), c = ce_values(model, multi, b.y);
    // The first restart consumes the same random stream as the single run.
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(c[i] >= a[i]);
}

TEST_CASE("PGD-KL starts at the random start and increases KL") {
    auto flat = zero_model("mlp(2,8,2)");
    auto b = take(make_moons(100, 0.1, 13), 100);
    auto spec = AttackSpec::defaults(AttackKind::pgd_kl, kEps);
    spec.steps = 0;
    Rng rng(4);
    CHECK(max_dev(pgd_kl(flat, b.x, spec, rng), add_uniform(b.x, kEps, 4)) == 0.0);
    spec.steps = 5;
    Rng rng2(4);
    CHECK(max_dev(pgd_kl(flat, b.x, spec, rng2), add_uniform(b.x, kEps, 4)) == 0.0);

    const auto& model = trained_moons();
    auto spec2 = AttackSpec::defaults(AttackKind::pgd_kl, 0.05);
    Rng rng3(4);
    auto adv = pgd_kl(model, b.x, spec2, rng3);
    auto start = add_uniform(b.x, 0.05, 4);
    Tensor ref;
    {
        NoGradGuard ng;
        ref = model.logits(b.x);
    }
    auto kl_adv = per_sample(model, adv, [&](const Tensor& z) { return energy::kl_divergence(ref, z); });
    auto kl_start = per_sample(model, start, [&](const Tensor& z) { return energy::kl_divergence(ref, z); });
    std::size_t up = 0;
    for (std::size_t i = 0; i < kl_adv.size(); ++i) up += kl_adv[i] >= kl_start[i];
    CHECK(double(up) / kl_adv.size() >= 0.95);
}

TEST_CASE("targeted PGD lowers the target CE and joint energy") {
    const auto& model = trained_moons();
    auto b = take(make_moons(300, 0.1, 14), 300);
    std::vector<std::size_t> target(b.y.size());
    for (std::size_t i = 0; i < target.size(); ++i) target[i] = 1 - b.y[i];
    auto spec = AttackSpec::defaults(AttackKind::pgd_targeted, 0.05);
    Rng rng(5);
    auto adv = pgd_targeted(model, b.x, target, spec, rng);
    auto start = add_uniform(b.x, 0.05, 5);
    auto ce_adv = ce_values(model, adv, target), ce_start = ce_values(model, start, target);
    auto e_adv = per_sample(model, adv, [&](const Tensor& z) { return energy::joint_energy(z, target); });
    auto e_start = per_sample(model, start, [&](const Tensor& z) { return energy::joint_energy(z, target); });
    std::size_t down = 0, e_down = 0;
    for (std::size_t i = 0; i < ce_adv.size(); ++i) {
        down += ce_adv[i] <= ce_start[i];
        e_down += e_adv[i] < e_start[i];
    }
    CHECK(double(down) / ce_adv.size() >= 0.95);
    CHECK(e_down * 2 > ce_adv.size());

    // Zero steps and no random start leave the input untouched.
    spec.steps = 0;
    spec.random_start = false;
    CHECK(max_dev(pgd_targeted(model, b.x, target, spec, rng), b.x) == 0.0);
}

TEST_CASE("CW margin definition and ascent") {
    std::vector<std::size_t> y{0};
    CHECK(margins(Tensor::from({1, 2}, {5.0, 0.0}), y)[0] == -5.0);
    const auto& model = trained_moons();
    auto b = take(make_moons(300, 0.1, 15), 300);
    auto spec = AttackSpec::defaults(AttackKind::cw_margin, 0.05);
    Rng rng(6);
    auto adv = cw_margin(model, b.x, b.y, spec, rng);
    Tensor z0, z1;
    {
        NoGradGuard ng;
        z0 = model.logits(b.x);
        z1 = model.logits(adv);
    }
    auto m0 = margins(z0, b.y), m1 = margins(z1, b.y);
    std::size_t up = 0;
    for (std::size_t i = 0; i < m0.size(); ++i) {
        up += m1[i] >= m0[i];
        if (m1[i] > 0.0) {
            const std::size_t pred = z1[2 * i] > z1[2 * i + 1] ? 0 : 1;
            CHECK(pred != b.y[i]);
        }
    }
    CHECK(double(up) / m0.size() >= 0.95);
}

TEST_CASE("high-energy augmented objective") {
    auto flat = zero_model("mlp(2,4,2)");
    std::vector<std::size_t> y{0};
    const Tensor x = Tensor::from({1, 2}, {0.2, 0.3});
    CHECK(std::abs(he_augmented_loss(flat, x, y, 1.0).item()) < 1e-15);
    CHECK(he_augmented_loss(flat, x, y, 0.0).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));

    const auto& model = trained_moons();
    auto b = take(make_moons(200, 0.1, 16), 200);
    auto ce = per_sample(model, b.x, [&](const Tensor& z) { return energy::cross_entropy(z, b.y); });
    double mean_ce = 0.0;
    for (double v : ce) mean_ce += v;
    CHECK(he_augmented_loss(model, b.x, b.y, 0.0).item() == doctest::Approx(mean_ce / 200).epsilon(1e-14));

    auto spec = AttackSpec::defaults(AttackKind::pgd, 0.05);
    auto mean_energy = [&](double lambda) {
        spec.he_lambda = lambda;
        Rng rng(7);
        auto adv = pgd(model, b.x, b.y, spec, rng);
        auto e = per_sample(model, adv, [](const Tensor& z) { return energy::marginal_energy(z); });
        double s = 0.0;
        for (double v : e) s += v;
        return s / e.size();
    };
    CHECK(mean_energy(2.0) > mean_energy(0.0));
}

TEST_CASE("attacks leave model parameters untouched") {
    auto model = trained_moons().clone();
    const auto before = model.flat_parameters();
    auto b = take(make_moons(50, 0.1, 17), 50);
    for (auto kind : {AttackKind::fgsm, AttackKind::pgd, AttackKind::pgd_kl}) {
        Rng rng(1);
        run_attack(model, b.x, b.y, AttackSpec::defaults(kind, kEps), rng);
    }
    CHECK(model.flat_parameters() == before);
    for (const auto& p : model.parameters()) CHECK(!p.value.has_grad());
}

TEST_CASE("spec validation") {
    auto s = AttackSpec::defaults(AttackKind::fgsm, 0.1);
    s.steps = 2;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    auto t = AttackSpec::defaults(AttackKind::pgd, 0.1);
    t.target = 1;
    CHECK_THROWS_AS(t.validate(), std::invalid_argument);
    auto u = AttackSpec::defaults(AttackKind::pgd_targeted, 0.1);
    u.target.reset();
    CHECK_THROWS_AS(u.validate(), std::invalid_argument);
    auto v = AttackSpec::defaults(AttackKind::pgd, 1.5);
    CHECK_THROWS_AS(v.validate(), std::invalid_argument);
    auto w = AttackSpec::defaults(AttackKind::pgd, 0.1);
    w.he_lambda = -1;
    CHECK_THROWS_AS(w.validate(), std::invalid_argument);
    CHECK(AttackSpec::defaults(AttackKind::rs_fgsm, 0.1).alpha == doctest::Approx(0.125));
    auto j = AttackSpec::defaults(AttackKind::pgd_targeted, 0.1).to_json();
    CHECK(AttackSpec::from_json(j).target == std::optional<std::size_t>(0));
    CHECK_THROWS_AS(parse_attack_kind("autoattack"), std::invalid_argument);
}
