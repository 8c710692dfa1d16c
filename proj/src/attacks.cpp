#include "elat/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

#include "elat/energy.hpp"
#include "elat/ops.hpp"

namespace elat::attacks {

namespace {

constexpr std::pair<AttackKind, const char*> kNames[] = {
    {AttackKind::fgsm, "fgsm"},     {AttackKind::rs_fgsm, "rs_fgsm"},
    {AttackKind::n_fgsm, "n_fgsm"}, {AttackKind::pgd, "pgd"},
    {AttackKind::pgd_kl, "pgd_kl"}, {AttackKind::pgd_targeted, "pgd_targeted"},
    {AttackKind::cw_margin, "cw_margin"},
};

// Per-sample objective [N] to ascend, given logits [N,K].
using Objective = std::function<Tensor(const Tensor& logits)>;

void require_kind(const AttackSpec& spec, AttackKind kind) {
    spec.validate();
    if (spec.kind != kind) {
        throw std::invalid_argument("attack: spec.kind is " + to_string(spec.kind) + ", expected " +
                                    to_string(kind));
    }
}

void require_inputs(const Classifier& model, const Tensor& x, std::size_t n_labels) {
    if (x.rank() < 2 || x.dim(0) != n_labels) {
        throw ShapeError("attack: batch " + shape_str(x.shape()) + " does not match " +
                         std::to_string(n_labels) + " labels");
    }
    for (double v : x.data()) {
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("attack: clean input outside [0,1]");
    }
    (void)model;
}

double sign_of(double g) { return g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0); }

double clip01(double v, bool on) { return on ? std::clamp(v, 0.0, 1.0) : v; }

Objective ce_objective(std::span<const std::size_t> y, double lambda) {
    return [y, lambda](const Tensor& z) {
        Tensor ce = energy::cross_entropy(z, y);
        if (lambda == 0.0) return ce;
        return ops::add(ce, ops::scale(energy::marginal_energy(z), lambda));
    };
}

// Gradient of sum(objective(model(x_at))) with respect to x_at.
std::vector<double> input_gradient(const Classifier& model, std::span<const double> x_at, const Shape& shape,
                                   const Objective& objective) {
    Tensor leaf = Tensor::from(shape, std::vector<double>(x_at.begin(), x_at.end()));
    leaf.set_requires_grad(true);
    const Tensor g = grad(ops::sum(objective(model.logits(leaf))), leaf);
    for (double v : g.data()) {
        if (!std::isfinite(v)) throw DomainError("attack: non-finite input gradient");
    }
    return std::vector<double>(g.data().begin(), g.data().end());
}

std::vector<double> objective_values(const Classifier& model, std::span<const double> x_at, const Shape& shape,
                                     const Objective& objective) {
    NoGradGuard no_grad;
    const Tensor v = objective(model.logits(Tensor::from(shape, std::vector<double>(x_at.begin(), x_at.end()))));
    return std::vector<double>(v.data().begin(), v.data().end());
}

std::vector<double> random_start(std::span<const double> x, double radius, bool clip, Rng& rng) {
    std::vector<double> out(x.begin(), x.end());
    if (radius <= 0.0) return out;
    std::uniform_real_distribution<double> u(-radius, radius);
    for (auto& v : out) v = clip01(v + u(rng), clip);
    return out;
}

// Projected sign-gradient ascent with restarts; the per-sample max-objective
// final iterate across restarts is returned.
Tensor iterate(const Classifier& model, const Tensor& x, const AttackSpec& spec, const Objective& objective,
               Rng& rng) {
    const auto clean = x.data();
    const std::size_t n = x.dim(0), per = x.numel() / n;
    std::vector<double> best;
    std::vector<double> best_value;
    for (std::size_t r = 0; r < spec.restarts; ++r) {
        std::vector<double> xa = spec.random_start ? random_start(clean, spec.epsilon, spec.clip_input, rng)
                                                   : std::vector<double>(clean.begin(), clean.end());
        for (std::size_t t = 0; t < spec.steps; ++t) {
            const auto g = input_gradient(model, xa, x.shape(), objective);
            for (std::size_t i = 0; i < xa.size(); ++i) {
                const double proposal = xa[i] + spec.alpha * sign_of(g[i]);
                xa[i] = clip01(std::clamp(proposal, clean[i] - spec.epsilon, clean[i] + spec.epsilon),
                               spec.clip_input);
            }
        }
        if (spec.restarts == 1) return Tensor::from(x.shape(), std::move(xa));
        auto value = objective_values(model, xa, x.shape(), objective);
        if (r == 0) {
            best = std::move(xa);
            best_value = std::move(value);
            continue;
        }
        for (std::size_t s = 0; s < n; ++s) {
            if (value[s] > best_value[s]) {
                best_value[s] = value[s];
                std::copy_n(xa.begin() + std::ptrdiff_t(s * per), per, best.begin() + std::ptrdiff_t(s * per));
            }
        }
    }
    return Tensor::from(x.shape(), std::move(best));
}

}  // namespace

std::string to_string(AttackKind kind) {
    for (const auto& [k, name] : kNames) {
        if (k == kind) return name;
    }
    return "unknown";
}

AttackKind parse_attack_kind(std::string_view name) {
    for (const auto& [k, n] : kNames) {
        if (name == n) return k;
    }
    throw std::invalid_argument("unknown attack kind '" + std::string(name) + "'");
}

AttackSpec AttackSpec::defaults(AttackKind kind, double epsilon) {
    AttackSpec s;
    s.kind = kind;
    s.epsilon = epsilon;
    switch (kind) {
        case AttackKind::fgsm:
        case AttackKind::n_fgsm:
            s.alpha = epsilon;
            s.steps = 1;
            s.random_start = false;
            break;
        case AttackKind::rs_fgsm:
            s.alpha = 1.25 * epsilon;
            s.steps = 1;
            break;
        default:
            s.alpha = epsilon / 4.0;
            s.steps = 10;
            break;
    }
    if (kind == AttackKind::pgd_targeted) s.target = 0;
    return s;
}

bool AttackSpec::single_step() const {
    return kind == AttackKind::fgsm || kind == AttackKind::rs_fgsm || kind == AttackKind::n_fgsm;
}

void AttackSpec::validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
        throw std::invalid_argument("attack." + field + ": " + why);
    };
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) fail("epsilon", "must be in [0,1]");
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) fail("alpha", "must be finite and >= 0");
    if (restarts == 0) fail("restarts", "must be >= 1");
    if (!(he_lambda >= 0.0) || !std::isfinite(he_lambda)) fail("he_lambda", "must be finite and >= 0");
    if (!(n_fgsm_k > 0.0) || !std::isfinite(n_fgsm_k)) fail("n_fgsm_k", "must be finite and > 0");
    if (single_step() && steps != 1) fail("steps", "single-step attacks require steps = 1");
    if ((kind == AttackKind::pgd || kind == AttackKind::cw_margin) && steps == 0) fail("steps", "must be >= 1");
    if (!single_step() && epsilon > 0.0 && alpha == 0.0) fail("alpha", "iterative attacks need alpha > 0");
    if (kind == AttackKind::n_fgsm && alpha > epsilon) fail("alpha", "n_fgsm step must not exceed epsilon");
    if (kind == AttackKind::pgd_targeted && !target) fail("target", "required for pgd_targeted");
    if (kind != AttackKind::pgd_targeted && target) fail("target", "only valid for pgd_targeted");
}

nlohmann::json AttackSpec::to_json() const {
    nlohmann::json j = {{"kind", to_string(kind)}, {"epsilon", epsilon},     {"alpha", alpha},
                        {"steps", steps},          {"restarts", restarts},   {"he_lambda", he_lambda},
                        {"n_fgsm_k", n_fgsm_k},    {"clip_input", clip_input}, {"random_start", random_start}};
    j["target"] = target ? nlohmann::json(*target) : nlohmann::json(nullptr);
    return j;
}

AttackSpec AttackSpec::from_json(const nlohmann::json& j) {
    AttackSpec s = defaults(parse_attack_kind(j.at("kind").get<std::string>()), j.at("epsilon").get<double>());
    s.alpha = j.value("alpha", s.alpha);
    s.steps = j.value("steps", s.steps);
    s.restarts = j.value("restarts", s.restarts);
    s.he_lambda = j.value("he_lambda", s.he_lambda);
    s.n_fgsm_k = j.value("n_fgsm_k", s.n_fgsm_k);
    s.clip_input = j.value("clip_input", s.clip_input);
    s.random_start = j.value("random_start", s.random_start);
    if (j.contains("target")) {
        s.target = j["target"].is_null() ? std::nullopt : std::optional<std::size_t>(j["target"].get<std::size_t>());
    }
    s.validate();
    return s;
}

Tensor he_augmented_loss(const Classifier& model, const Tensor& x_adv, std::span<const std::size_t> y,
                         double lambda) {
    if (!(lambda >= 0.0)) throw std::invalid_argument("he_augmented_loss: lambda must be >= 0");
    return ops::mean(ce_objective(y, lambda)(model.logits(x_adv)));
}

Tensor fgsm(const Classifier& model, const Tensor& x, std::span<const std::size_t> y, const AttackSpec& spec) {
    require_kind(spec, AttackKind::fgsm);
    require_inputs(model, x, y.size());
    const auto g = input_gradient(model, x.data(), x.shape(), ce_objective(y, spec.he_lambda));
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = clip01(x[i] + spec.epsilon * sign_of(g[i]), spec.clip_input);
    }
    return Tensor::from(x.shape(), std::move(out));
}

Tensor rs_fgsm(const Classifier& model, const Tensor& x, std::span<const std::size_t> y, const AttackSpec& spec,
               Rng& rng) {
    require_kind(spec, AttackKind::rs_fgsm);
    require_inputs(model, x, y.size());
    AttackSpec one = spec;
    one.random_start = true;
    return iterate(model, x, one, ce_objective(y, spec.he_lambda), rng);
}

Tensor n_fgsm(const Classifier& model, const Tensor& x, std::span<const std::size_t> y, const AttackSpec& spec,
              Rng& rng) {
    require_kind(spec, AttackKind::n_fgsm);
    require_inputs(model, x, y.size());
    const auto xn = random_start(x.data(), spec.n_fgsm_k * spec.epsilon, spec.clip_input, rng);
    const auto g = input_gradient(model, xn, x.shape(), ce_objective(y, spec.he_lambda));
    std::vector<double> out(xn.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = clip01(xn[i] + spec.alpha * sign_of(g[i]), spec.clip_input);
    }
    return Tensor::from(x.shape(), std::move(out));
}

Tensor pgd(const Classifier& model, const Tensor& x, std::span<const std::size_t> y, const AttackSpec& spec,
           Rng& rng) {
    require_kind(spec, AttackKind::pgd);
    require_inputs(model, x, y.size());
    return iterate(model, x, spec, ce_objective(y, spec.he_lambda), rng);
}

Tensor pgd_kl(const Classifier& model, const Tensor& x, const AttackSpec& spec, Rng& rng) {
    require_kind(spec, AttackKind::pgd_kl);
    require_inputs(model, x, x.rank() >= 2 ? x.dim(0) : 0);
    Tensor reference;
    {
        NoGradGuard no_grad;
        reference = model.logits(x.detach());
    }
    return iterate(model, x, spec, [reference](const Tensor& z) { return energy::kl_divergence(reference, z); },
                   rng);
}

Tensor pgd_targeted(const Classifier& model, const Tensor& x, std::span<const std::size_t> y_t,
                    const AttackSpec& spec, Rng& rng) {
    require_kind(spec, AttackKind::pgd_targeted);
    require_inputs(model, x, y_t.size());
    return iterate(model, x, spec, [y_t](const Tensor& z) { return ops::neg(energy::cross_entropy(z, y_t)); },
                   rng);
}

Tensor cw_margin(const Classifier& model, const Tensor& x, std::span<const std::size_t> y, const AttackSpec& spec,
                 Rng& rng) {
    require_kind(spec, AttackKind::cw_margin);
    require_inputs(model, x, y.size());
    const std::size_t k = model.num_classes();
    std::vector<double> mask(y.size() * k, 0.0);
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] >= k) throw std::out_of_range("cw_margin: label out of range");
        mask[i * k + y[i]] = -1e30;
    }
    const Tensor mask_t = Tensor::from({y.size(), k}, std::move(mask));
    return iterate(model, x, spec,
                   [y, mask_t](const Tensor& z) {
                       return ops::sub(ops::max_last(ops::add(z, mask_t)), ops::gather(z, y));
                   },
                   rng);
}

Tensor run_attack(const Classifier& model, const Tensor& x, std::span<const std::size_t> y,
                  const AttackSpec& spec, Rng& rng) {
    switch (spec.kind) {
        case AttackKind::fgsm: return fgsm(model, x, y, spec);
        case AttackKind::rs_fgsm: return rs_fgsm(model, x, y, spec, rng);
        case AttackKind::n_fgsm: return n_fgsm(model, x, y, spec, rng);
        case AttackKind::pgd: return pgd(model, x, y, spec, rng);
        case AttackKind::pgd_kl: return pgd_kl(model, x, spec, rng);
        case AttackKind::pgd_targeted: {
            spec.validate();
            const std::vector<std::size_t> targets(y.size(), *spec.target);
            return pgd_targeted(model, x, targets, spec, rng);
        }
        case AttackKind::cw_margin: return cw_margin(model, x, y, spec, rng);
    }
    throw std::logic_error("run_attack: unhandled kind");
}

std::vector<double> margins(const Tensor& logits, std::span<const std::size_t> y) {
    if (logits.rank() != 2 || logits.dim(0) != y.size()) throw ShapeError("margins: expected [N,K] logits");
    const std::size_t k = logits.dim(1);
    std::vector<double> out(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        double best = -INFINITY;
        for (std::size_t c = 0; c < k; ++c) {
            if (c != y[i]) best = std::max(best, logits[i * k + c]);
        }
        out[i] = best - logits[i * k + y[i]];
    }
    return out;
}

}  // namespace elat::attacks
