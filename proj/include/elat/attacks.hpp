#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "json.hpp"

#include "elat/models.hpp"
#include "elat/random.hpp"
#include "elat/tensor.hpp"

// L-infinity attacks. Every attack takes the clean batch x [N, ...] with
// values in [0,1] and returns a detached x_adv of the same shape. Gradients
// are taken with respect to the input only; model parameters are never
// touched.
namespace elat::attacks {

enum class AttackKind { fgsm, rs_fgsm, n_fgsm, pgd, pgd_kl, pgd_targeted, cw_margin };

std::string to_string(AttackKind kind);
AttackKind parse_attack_kind(std::string_view name);

struct AttackSpec {
    AttackKind kind = AttackKind::pgd;
    double epsilon = 8.0 / 255.0;
    double alpha = 2.0 / 255.0;
    std::size_t steps = 10;
    std::size_t restarts = 1;
    std::optional<std::size_t> target;
    double he_lambda = 0.0;
    double n_fgsm_k = 2.0;
    bool clip_input = true;
    /// Start iterative attacks from x + U[-eps, eps]. Always on for rs_fgsm,
    /// whose definition includes it.
    bool random_start = true;

    /// Kind-specific defaults: alpha = 1.25 eps (rs_fgsm), eps (fgsm, n_fgsm),
    /// eps/4 (iterative kinds); steps 1 for single-step kinds.
    static AttackSpec defaults(AttackKind kind, double epsilon);

    bool single_step() const;
    /// Throws std::invalid_argument naming the offending field.
    void validate() const;

    nlohmann::json to_json() const;
    static AttackSpec from_json(const nlohmann::json& j);
};

/// Mean over the batch of CE(x', y) + lambda * E(x').
Tensor he_augmented_loss(const Classifier& model, const Tensor& x_adv, std::span<const std::size_t> y,
                         double lambda);

Tensor fgsm(const Classifier& model, const Tensor& x, std::span<const std::size_t> y, const AttackSpec& spec);
Tensor rs_fgsm(const Classifier& model, const Tensor& x, std::span<const std::size_t> y,
               const AttackSpec& spec, Rng& rng);
Tensor n_fgsm(const Classifier& model, const Tensor& x, std::span<const std::size_t> y,
              const AttackSpec& spec, Rng& rng);
Tensor pgd(const Classifier& model, const Tensor& x, std::span<const std::size_t> y, const AttackSpec& spec,
           Rng& rng);
/// Maximizes KL(p(.|x) || p(.|x')) with p(.|x) held fixed.
Tensor pgd_kl(const Classifier& model, const Tensor& x, const AttackSpec& spec, Rng& rng);
/// Minimizes CE(x', y_t) per sample.
Tensor pgd_targeted(const Classifier& model, const Tensor& x, std::span<const std::size_t> y_t,
                    const AttackSpec& spec, Rng& rng);
/// Maximizes the margin max_{k != y} z_k - z_y.
Tensor cw_margin(const Classifier& model, const Tensor& x, std::span<const std::size_t> y,
                 const AttackSpec& spec, Rng& rng);

/// Dispatches on spec.kind. For pgd_targeted every sample gets spec.target.
Tensor run_attack(const Classifier& model, const Tensor& x, std::span<const std::size_t> y,
                  const AttackSpec& spec, Rng& rng);

/// Per-sample margin max_{k != y} z_k - z_y of logits [N,K].
std::vector<double> margins(const Tensor& logits, std::span<const std::size_t> y);

}  // namespace elat::attacks
