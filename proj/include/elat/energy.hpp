#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "elat/models.hpp"
#include "elat/tensor.hpp"

// Energies read off a classifier's logits z:
//   marginal  E(x)   = -logsumexp_k z_k
//   joint     E(x,y) = -z_y
//   CE(x,y)        = E(x,y) - E(x)
namespace elat::energy {

using Labels = std::vector<std::size_t>;

double marginal_energy(std::span<const double> logits);
double joint_energy(std::span<const double> logits, std::size_t y);
double ce_from_energies(std::span<const double> logits, std::size_t y);

/// KL(p(.|x) || p(.|x')) split into
///   conditional = sum_k p(k|x) [E(x',k) - E(x,k)]
///   marginal    = E(x) - E(x')
struct KlTerms {
    double conditional = 0.0;
    double marginal = 0.0;
    double total() const { return conditional + marginal; }
};
KlTerms kl_ebm_decomposition(std::span<const double> logits_x, std::span<const double> logits_xadv);

/// Clean/adversarial energy pair for one sample plus the derived shifts.
struct EnergyRecord {
    double e_x = 0.0;
    double e_xy = 0.0;
    double e_xadv = 0.0;
    double e_xadv_y = 0.0;
    double delta_e_x = 0.0;   // e_x - e_xadv
    double delta_e_xy = 0.0;  // e_xy - e_xadv_y
    double shift_norm = 0.0;  // ||[delta_e_x, delta_e_xy]||_2

    static EnergyRecord from_energies(double e_x, double e_xy, double e_xadv, double e_xadv_y);
    static EnergyRecord from_logits(std::span<const double> clean, std::span<const double> adv,
                                    std::size_t y);
};

/// max(shift_norm - gamma, 0). Throws std::invalid_argument for gamma < 0.
double der_penalty(const EnergyRecord& rec, double gamma);

/// max |grad_x(-E(x)) - grad_x logsumexp(f(x))| over a batch x.
double score_check(const Classifier& model, const Tensor& x);

/// max |grad_x CE - (grad_x E(x,y) - grad_x E(x))|, with CE taken through
/// log-softmax so the two sides are computed by different routes.
double ce_gradient_decomposition(const Classifier& model, const Tensor& x, std::span<const std::size_t> y);

// Differentiable batch forms: logits [N,K] -> per-sample [N].
Tensor marginal_energy(const Tensor& logits);
Tensor joint_energy(const Tensor& logits, std::span<const std::size_t> y);
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> y);
/// KL(softmax(ref) || softmax(logits)) per row; gradients flow through both.
Tensor kl_divergence(const Tensor& ref_logits, const Tensor& logits);
/// Per-sample hinge max(||[dE(x), dE(x,y)]||_2 - gamma, 0). The subgradient
/// at the kink is zero.
Tensor der_penalty(const Tensor& clean_logits, const Tensor& adv_logits,
                   std::span<const std::size_t> y, double gamma);

}  // namespace elat::energy
