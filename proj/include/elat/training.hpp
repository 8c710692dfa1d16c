#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "elat/attacks.hpp"
#include "elat/data.hpp"
#include "elat/energy.hpp"
#include "elat/models.hpp"
#include "elat/telemetry.hpp"

namespace elat::training {

enum class Method { sat, trades, der_single, der_multi, alp, kl_outer, weighted_ce };

std::string to_string(Method m);
Method parse_method(std::string_view name);

struct LrStep {
    std::size_t epoch = 0;  // first epoch (0-based) using this rate
    double lr = 0.0;
};

/// Fixed per-sample CE weights chosen by whether the adversarial prediction
/// is correct.
struct Weights {
    double w_correct = 1e-5;
    double w_incorrect = 0.1;
    bool normalized = false;  // divide by sum(w) instead of n
};

/// Per-epoch evaluation on the held-out split.
struct EvalSpec {
    bool enabled = true;
    std::size_t pgd_steps = 20;
    std::size_t pgd_restarts = 1;
    std::size_t max_samples = 0;  // 0: whole split
};

struct TrainSpec {
    Method method = Method::sat;
    attacks::AttackSpec attack = attacks::AttackSpec::defaults(attacks::AttackKind::pgd, 8.0 / 255.0);
    std::size_t epochs = 10;
    std::size_t batch_size = 64;
    std::vector<LrStep> lr_schedule{{0, 0.05}};
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double beta = 0.5;  // DER weight; ALP / KL-outer lambda
    double gamma = 0.2;
    std::optional<std::size_t> der_start_epoch;  // der_multi; default 60% of epochs
    double trades_beta = 6.0;
    std::optional<Weights> weights;
    std::uint64_t seed = 0;
    EvalSpec eval;

    /// Throws std::invalid_argument naming the offending field.
    void validate() const;
    double lr_at(std::size_t epoch) const;
    std::size_t der_start() const;

    nlohmann::json to_json() const;
};

/// Loss of one batch plus everything telemetry needs from it.
struct BatchOutcome {
    Tensor loss;
    std::vector<telemetry::SampleRecord> records;  // index = position in batch
    double der_penalty_mean = 0.0;
    std::size_t aae_count = 0;
    double effective_scale = 1.0;
    std::optional<double> kl_conditional_mean;
    std::optional<double> kl_marginal_mean;
    std::optional<double> kl_mean;        // direct KL, as used in the loss
    std::optional<double> alp_term_mean;  // sum_k (E(x,k) - E(x',k))^2
    std::optional<double> alp_logit_mean;  // same term through the logits
};

/// Builds the training objective for one batch of clean x and attack output
/// x_adv. `epoch` is 0-based and gates der_multi.
BatchOutcome batch_objective(const Classifier& model, const Tensor& x, const Tensor& x_adv,
                             std::span<const std::size_t> y, const TrainSpec& spec, std::size_t epoch,
                             bool aae_objective_loss = false);

std::vector<std::size_t> predict(const Tensor& logits);

struct EvalResult {
    double clean_acc = 0.0;
    double pgd_acc = 0.0;
    double fgsm_acc = 0.0;
    double heldout_attack_acc = 0.0;
};
/// Accuracies (percent) of the model on `data` under no attack, PGD
/// (alpha = eps/4, random start), FGSM and the training attack.
EvalResult evaluate(const Classifier& model, const Dataset& data, const TrainSpec& spec, Rng& rng);

/// SGD with momentum and coupled weight decay:
///   d = g + wd * p;  v = mu * v + d;  p -= lr * v
void sgd_step(std::span<NamedParameter> params, std::span<const Tensor> grads, std::vector<double>& velocity,
              double lr, double momentum, double weight_decay);

class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(const std::string& what, Checkpoint state)
        : std::runtime_error(what), state_(std::move(state)) {}
    const Checkpoint& state() const { return state_; }

private:
    Checkpoint state_;
};

struct TrainResult {
    Classifier model;
    std::vector<double> momentum;
    std::optional<Classifier> best;
    std::size_t best_epoch = 0;
    std::optional<double> best_metric;
    telemetry::TelemetryLog log;
};

/// Epoch-by-epoch driver. Every stochastic choice in epoch e comes from
/// streams derived from (seed, e), so stopping after any epoch and resuming
/// from the checkpoint reproduces the uninterrupted run.
class Trainer {
public:
    Trainer(Classifier model, const Dataset& train, const Dataset* heldout, TrainSpec spec,
            telemetry::Options options = {});

    static Trainer resume(const Checkpoint& state, const std::optional<Checkpoint>& best, const Dataset& train,
                          const Dataset* heldout, TrainSpec spec, telemetry::Options options = {},
                          telemetry::TelemetryLog prior = {});

    bool done() const { return epoch_ >= spec_.epochs; }
    std::size_t epoch() const { return epoch_; }
    void run_epoch();
    /// Runs until done; `after_epoch` sees the trainer after each epoch.
    void run(const std::function<void(const Trainer&)>& after_epoch = {});

    const Classifier& model() const { return model_; }
    const telemetry::TelemetryLog& log() const { return log_; }
    const TrainSpec& spec() const { return spec_; }
    Checkpoint checkpoint() const;
    std::optional<Checkpoint> best_checkpoint() const;
    TrainResult result() const;

private:
    Classifier model_;
    const Dataset& train_;
    const Dataset* heldout_;
    TrainSpec spec_;
    telemetry::Options options_;
    std::vector<double> velocity_;
    std::size_t epoch_ = 0;
    std::optional<Classifier> best_;
    std::size_t best_epoch_ = 0;
    std::optional<double> best_metric_;
    telemetry::TelemetryLog log_;
};

/// One-call wrappers; each checks that spec.method belongs to it.
TrainResult train_sat(Classifier model, const Dataset& train, const Dataset* heldout, const TrainSpec& spec,
                      telemetry::Options options = {});
TrainResult train_trades(Classifier model, const Dataset& train, const Dataset* heldout, const TrainSpec& spec,
                         telemetry::Options options = {});
TrainResult train_der(Classifier model, const Dataset& train, const Dataset* heldout, const TrainSpec& spec,
                      telemetry::Options options = {});
TrainResult train_alp_or_klouter(Classifier model, const Dataset& train, const Dataset* heldout,
                                 const TrainSpec& spec, telemetry::Options options = {});
TrainResult train_weighted_ce(Classifier model, const Dataset& train, const Dataset* heldout,
                              const TrainSpec& spec, telemetry::Options options = {});
/// Dispatches on spec.method.
TrainResult train(Classifier model, const Dataset& train, const Dataset* heldout, const TrainSpec& spec,
                  telemetry::Options options = {});

}  // namespace elat::training
