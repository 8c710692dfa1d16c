#include "elat/energy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "elat/ops.hpp"

namespace elat::energy {

namespace {

void require_valid_logits(std::span<const double> z) {
    if (z.size() < 2) throw std::invalid_argument("energy: need at least 2 logits");
    for (double v : z) {
        if (!std::isfinite(v)) throw DomainError("energy: non-finite logit");
    }
}

void require_class(std::span<const double> z, std::size_t y) {
    if (y >= z.size()) {
        throw std::out_of_range("energy: class " + std::to_string(y) + " out of range for " +
                                std::to_string(z.size()) + " logits");
    }
}

double logsumexp(std::span<const double> z) {
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - m);
    return m + std::log(s);
}

}  // namespace

double marginal_energy(std::span<const double> logits) {
    require_valid_logits(logits);
    return -logsumexp(logits);
}

double joint_energy(std::span<const double> logits, std::size_t y) {
    require_valid_logits(logits);
    require_class(logits, y);
    return -logits[y];
}

double ce_from_energies(std::span<const double> logits, std::size_t y) {
    return joint_energy(logits, y) - marginal_energy(logits);
}

KlTerms kl_ebm_decomposition(std::span<const double> logits_x, std::span<const double> logits_xadv) {
    require_valid_logits(logits_x);
    require_valid_logits(logits_xadv);
    if (logits_x.size() != logits_xadv.size()) {
        throw std::invalid_argument("kl_ebm_decomposition: logit vectors differ in length");
    }
    const double e_x = marginal_energy(logits_x);
    const double e_xadv = marginal_energy(logits_xadv);
    KlTerms t;
    for (std::size_t k = 0; k < logits_x.size(); ++k) {
        const double p = std::exp(logits_x[k] + e_x);  // p(k|x) = exp(z_k - lse)
        t.conditional += p * ((-logits_xadv[k]) - (-logits_x[k]));
    }
    t.marginal = e_x - e_xadv;
    return t;
}

EnergyRecord EnergyRecord::from_energies(double e_x, double e_xy, double e_xadv, double e_xadv_y) {
    EnergyRecord r;
    r.e_x = e_x;
    r.e_xy = e_xy;
    r.e_xadv = e_xadv;
    r.e_xadv_y = e_xadv_y;
    r.delta_e_x = e_x - e_xadv;
    r.delta_e_xy = e_xy - e_xadv_y;
    r.shift_norm = std::sqrt(r.delta_e_x * r.delta_e_x + r.delta_e_xy * r.delta_e_xy);
    return r;
}

EnergyRecord EnergyRecord::from_logits(std::span<const double> clean, std::span<const double> adv,
                                       std::size_t y) {
    return from_energies(marginal_energy(clean), joint_energy(clean, y), marginal_energy(adv),
                         joint_energy(adv, y));
}

double der_penalty(const EnergyRecord& rec, double gamma) {
    if (!(gamma >= 0.0)) throw std::invalid_argument("der_penalty: gamma must be >= 0");
    return std::max(rec.shift_norm - gamma, 0.0);
}

double score_check(const Classifier& model, const Tensor& x) {
    Tensor xa = x.detach();
    xa.set_requires_grad(true);
    const Tensor neg_energy = ops::neg(ops::sum(marginal_energy(model.logits(xa))));
    const Tensor g_score = grad(neg_energy, xa);

    Tensor xb = x.detach();
    xb.set_requires_grad(true);
    const Tensor g_lse = grad(ops::sum(ops::logsumexp(model.logits(xb))), xb);

    double worst = 0.0;
    for (std::size_t i = 0; i < g_score.numel(); ++i) {
        worst = std::max(worst, std::abs(g_score[i] - g_lse[i]));
    }
    return worst;
}

double ce_gradient_decomposition(const Classifier& model, const Tensor& x,
                                 std::span<const std::size_t> y) {
    Tensor xa = x.detach();
    xa.set_requires_grad(true);
    const Tensor z = model.logits(xa);
    const Tensor ce = ops::neg(ops::sum(ops::gather(ops::log_softmax(z), y)));
    const Tensor g_ce = grad(ce, xa);

    Tensor xb = x.detach();
    xb.set_requires_grad(true);
    const Tensor g_joint = grad(ops::sum(joint_energy(model.logits(xb), y)), xb);
    Tensor xc = x.detach();
    xc.set_requires_grad(true);
    const Tensor g_marginal = grad(ops::sum(marginal_energy(model.logits(xc))), xc);

    double worst = 0.0;
    for (std::size_t i = 0; i < g_ce.numel(); ++i) {
        worst = std::max(worst, std::abs(g_ce[i] - (g_joint[i] - g_marginal[i])));
    }
    return worst;
}

Tensor marginal_energy(const Tensor& logits) { return ops::neg(ops::logsumexp(logits)); }

Tensor joint_energy(const Tensor& logits, std::span<const std::size_t> y) {
    return ops::neg(ops::gather(logits, y));
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> y) {
    return ops::sub(joint_energy(logits, y), marginal_energy(logits));
}

Tensor kl_divergence(const Tensor& ref_logits, const Tensor& logits) {
    if (ref_logits.shape() != logits.shape()) {
        throw ShapeError("kl_divergence: shapes " + shape_str(ref_logits.shape()) + " and " +
                         shape_str(logits.shape()) + " differ");
    }
    const Tensor p = ops::softmax(ref_logits);
    const Tensor diff = ops::sub(ops::log_softmax(ref_logits), ops::log_softmax(logits));
    return ops::sum_last(ops::mul(p, diff));
}

Tensor der_penalty(const Tensor& clean_logits, const Tensor& adv_logits,
                   std::span<const std::size_t> y, double gamma) {
    if (!(gamma >= 0.0)) throw std::invalid_argument("der_penalty: gamma must be >= 0");
    const Tensor d_marginal = ops::sub(marginal_energy(clean_logits), marginal_energy(adv_logits));
    const Tensor d_joint = ops::sub(joint_energy(clean_logits, y), joint_energy(adv_logits, y));
    const Tensor parts[] = {d_marginal, d_joint};
    return ops::relu(ops::add_scalar(ops::l2_norm(ops::stack_last(parts)), -gamma));
}

}  // namespace elat::energy
