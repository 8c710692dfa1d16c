#include "elat/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "elat/ops.hpp"
#include "elat/random.hpp"

namespace elat::training {

using attacks::AttackKind;
using attacks::AttackSpec;

namespace {

constexpr std::pair<Method, const char*> kMethodNames[] = {
    {Method::sat, "sat"},     {Method::trades, "trades"},     {Method::der_single, "der_single"},
    {Method::der_multi, "der_multi"}, {Method::alp, "alp"}, {Method::kl_outer, "kl_outer"},
    {Method::weighted_ce, "weighted_ce"},
};

std::vector<double> row_of(const Tensor& z, std::size_t r) {
    const std::size_t k = z.dim(1);
    return std::vector<double>(z.data().begin() + std::ptrdiff_t(r * k), z.data().begin() + std::ptrdiff_t((r + 1) * k));
}

double mean_of(const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += v;
    return s / double(t.numel());
}

std::vector<std::size_t> iota(std::size_t n) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
}

}  // namespace

std::string to_string(Method m) {
    for (const auto& [k, name] : kMethodNames) {
        if (k == m) return name;
    }
    return "unknown";
}

Method parse_method(std::string_view name) {
    for (const auto& [k, n] : kMethodNames) {
        if (name == n) return k;
    }
    throw std::invalid_argument("unknown training method '" + std::string(name) + "'");
}

void TrainSpec::validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
        throw std::invalid_argument("train." + field + ": " + why);
    };
    attack.validate();
    if (batch_size == 0) fail("batch_size", "must be >= 1");
    if (lr_schedule.empty() || lr_schedule.front().epoch != 0) fail("lr_schedule", "must start at epoch 0");
    for (std::size_t i = 0; i < lr_schedule.size(); ++i) {
        if (!(lr_schedule[i].lr >= 0.0) || !std::isfinite(lr_schedule[i].lr)) fail("lr_schedule", "rates must be >= 0");
        if (i > 0 && lr_schedule[i].epoch <= lr_schedule[i - 1].epoch) fail("lr_schedule", "epochs must increase");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum", "must be in [0,1)");
    if (!(weight_decay >= 0.0)) fail("weight_decay", "must be >= 0");
    if (!(beta >= 0.0) || !std::isfinite(beta)) fail("beta", "must be finite and >= 0");
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) fail("gamma", "must be finite and >= 0");
    if (!(trades_beta >= 0.0) || !std::isfinite(trades_beta)) fail("trades_beta", "must be finite and >= 0");
    if (der_start_epoch && method != Method::der_multi) fail("der_start_epoch", "only valid for der_multi");
    if (der_start_epoch && *der_start_epoch > epochs) fail("der_start_epoch", "must be <= epochs");
    if (eval.pgd_steps == 0 || eval.pgd_restarts == 0) fail("eval", "pgd_steps and pgd_restarts must be >= 1");

    const AttackKind k = attack.kind;
    switch (method) {
        case Method::sat:
            if (!(attack.single_step() || k == AttackKind::pgd)) fail("attack", "sat needs pgd or an fgsm variant");
            break;
        case Method::trades:
            if (k != AttackKind::pgd_kl) fail("attack", "trades needs pgd_kl");
            break;
        case Method::der_single:
            if (!attack.single_step()) fail("attack", "der_single needs a single-step attack");
            break;
        case Method::der_multi:
            if (attack.single_step()) fail("attack", "der_multi needs a multi-step attack");
            break;
        default:
            break;
    }
    if (method != Method::trades && (k == AttackKind::pgd_kl || k == AttackKind::pgd_targeted)) {
        fail("attack", to_string(method) + " needs a label-driven untargeted attack");
    }
    if (method == Method::weighted_ce) {
        if (!weights) fail("weights", "required for weighted_ce");
        if (!(weights->w_correct >= 0.0 && weights->w_incorrect >= 0.0)) fail("weights", "must be >= 0");
    } else if (weights) {
        fail("weights", "only valid for weighted_ce");
    }
}

double TrainSpec::lr_at(std::size_t epoch) const {
    double lr = lr_schedule.front().lr;
    for (const auto& s : lr_schedule) {
        if (s.epoch <= epoch) lr = s.lr;
    }
    return lr;
}

std::size_t TrainSpec::der_start() const {
    return der_start_epoch.value_or(static_cast<std::size_t>(std::floor(0.6 * double(epochs))));
}

nlohmann::json TrainSpec::to_json() const {
    nlohmann::json sched = nlohmann::json::array();
    for (const auto& s : lr_schedule) sched.push_back({s.epoch, s.lr});
    nlohmann::json j = {{"method", to_string(method)},
                        {"attack", attack.to_json()},
                        {"epochs", epochs},
                        {"batch_size", batch_size},
                        {"lr_schedule", sched},
                        {"momentum", momentum},
                        {"weight_decay", weight_decay},
                        {"beta", beta},
                        {"gamma", gamma},
                        {"trades_beta", trades_beta},
                        {"seed", seed},
                        {"eval",
                         {{"enabled", eval.enabled},
                          {"pgd_steps", eval.pgd_steps},
                          {"pgd_restarts", eval.pgd_restarts},
                          {"max_samples", eval.max_samples}}}};
    j["der_start_epoch"] = der_start_epoch ? nlohmann::json(*der_start_epoch) : nlohmann::json(nullptr);
    if (weights) {
        j["weights"] = {{"w_correct", weights->w_correct},
                        {"w_incorrect", weights->w_incorrect},
                        {"normalized", weights->normalized}};
    }
    return j;
}

std::vector<std::size_t> predict(const Tensor& logits) {
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c) {
            if (logits[i * k + c] > logits[i * k + best]) best = c;
        }
        out[i] = best;
    }
    return out;
}

BatchOutcome batch_objective(const Classifier& model, const Tensor& x, const Tensor& x_adv,
                             std::span<const std::size_t> y, const TrainSpec& spec, std::size_t epoch,
                             bool aae_objective_loss) {
    const Method m = spec.method;
    const bool clean_in_graph = m != Method::sat && m != Method::weighted_ce;
    Tensor z_clean;
    if (clean_in_graph) {
        z_clean = model.logits(x);
    } else {
        NoGradGuard no_grad;
        z_clean = model.logits(x);
    }
    const Tensor z_adv = model.logits(x_adv);
    const Tensor ce_adv = energy::cross_entropy(z_adv, y);
    const std::size_t n = y.size();
    const auto pred_clean = predict(z_clean), pred_adv = predict(z_adv);

    BatchOutcome out;
    out.records.resize(n);
    std::vector<double> der_mask(n, 0.0);
    const double lambda = spec.attack.he_lambda;
    for (std::size_t i = 0; i < n; ++i) {
        const auto zc = row_of(z_clean, i), za = row_of(z_adv, i);
        auto& r = out.records[i];
        r.index = i;
        r.label = y[i];
        r.energy = energy::EnergyRecord::from_logits(zc, za, y[i]);
        const double ce_c = energy::ce_from_energies(zc, y[i]);
        const double ce_a = energy::ce_from_energies(za, y[i]);
        r.loss_clean = aae_objective_loss ? ce_c + lambda * r.energy.e_x : ce_c;
        r.loss_adv = aae_objective_loss ? ce_a + lambda * r.energy.e_xadv : ce_a;
        r.is_aae = r.loss_adv < r.loss_clean;
        r.pred_clean = pred_clean[i];
        r.pred_adv = pred_adv[i];
        der_mask[i] = ce_a < ce_c ? 1.0 : 0.0;
        out.aae_count += ce_a < ce_c;
    }

    auto kl_stats = [&](const Tensor& kl) {
        double cond = 0.0, marg = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto t = energy::kl_ebm_decomposition(row_of(z_clean, i), row_of(z_adv, i));
            cond += t.conditional;
            marg += t.marginal;
        }
        out.kl_conditional_mean = cond / double(n);
        out.kl_marginal_mean = marg / double(n);
        out.kl_mean = mean_of(kl);
    };

    switch (m) {
        case Method::sat:
            out.loss = ops::mean(ce_adv);
            break;
        case Method::trades: {
            const Tensor kl = energy::kl_divergence(z_clean, z_adv);
            out.loss = ops::add(ops::mean(energy::cross_entropy(z_clean, y)), ops::scale(ops::mean(kl), spec.trades_beta));
            kl_stats(kl);
            break;
        }
        case Method::kl_outer: {
            const Tensor kl = energy::kl_divergence(z_clean, z_adv);
            out.loss = ops::add(ops::mean(ce_adv), ops::scale(ops::mean(kl), spec.beta));
            kl_stats(kl);
            break;
        }
        case Method::der_single:
        case Method::der_multi: {
            const Tensor hinge = energy::der_penalty(z_clean, z_adv, y, spec.gamma);
            if (m == Method::der_single) {
                const Tensor gated = ops::mul(hinge, Tensor::from({n}, der_mask));
                out.loss = ops::add(ops::mean(ce_adv), ops::scale(ops::mean(gated), spec.beta));
                for (std::size_t i = 0; i < n; ++i) out.records[i].der_penalty = gated[i];
            } else if (epoch >= spec.der_start()) {
                out.loss = ops::add(ops::mean(ce_adv), ops::scale(ops::mean(hinge), spec.beta));
                for (std::size_t i = 0; i < n; ++i) out.records[i].der_penalty = hinge[i];
            } else {
                out.loss = ops::mean(ce_adv);
            }
            break;
        }
        case Method::alp: {
            const Tensor diff = ops::sub(z_clean, z_adv);
            const Tensor term = ops::sum_last(ops::mul(diff, diff));
            out.loss = ops::add(ops::mean(ce_adv), ops::scale(ops::mean(term), spec.beta));
            double s = 0.0;
            const std::size_t k = z_clean.dim(1);
            for (std::size_t i = 0; i < n; ++i) {
                const auto zc = row_of(z_clean, i), za = row_of(z_adv, i);
                for (std::size_t c = 0; c < k; ++c) {
                    const double d = energy::joint_energy(zc, c) - energy::joint_energy(za, c);
                    s += d * d;
                }
            }
            out.alp_term_mean = s / double(n);
            out.alp_logit_mean = mean_of(term);
            break;
        }
        case Method::weighted_ce: {
            const Weights& w = *spec.weights;
            std::vector<double> wv(n);
            double total = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                wv[i] = pred_adv[i] == y[i] ? w.w_correct : w.w_incorrect;
                total += wv[i];
            }
            const double denom = w.normalized ? total : double(n);
            if (!(denom > 0.0)) throw DomainError("weighted_ce: all weights are zero");
            out.loss = ops::scale(ops::sum(ops::mul(ce_adv, Tensor::from({n}, wv))), 1.0 / denom);
            out.effective_scale = total / denom;
            break;
        }
    }
    double pen = 0.0;
    for (const auto& r : out.records) pen += r.der_penalty;
    out.der_penalty_mean = pen / double(n);
    return out;
}

EvalResult evaluate(const Classifier& model, const Dataset& data, const TrainSpec& spec, Rng& rng) {
    const std::size_t n = spec.eval.max_samples ? std::min(spec.eval.max_samples, data.size()) : data.size();
    const double eps = spec.attack.epsilon;
    AttackSpec pgd = AttackSpec::defaults(AttackKind::pgd, eps);
    pgd.steps = spec.eval.pgd_steps;
    pgd.restarts = spec.eval.pgd_restarts;
    const AttackSpec fgsm = AttackSpec::defaults(AttackKind::fgsm, eps);
    constexpr std::size_t kChunk = 256;
    std::size_t ok_clean = 0, ok_pgd = 0, ok_fgsm = 0, ok_train = 0;
    auto correct = [&](const Tensor& x, std::span<const std::size_t> y) {
        NoGradGuard no_grad;
        const auto p = predict(model.logits(x));
        std::size_t c = 0;
        for (std::size_t i = 0; i < y.size(); ++i) c += p[i] == y[i];
        return c;
    };
    for (std::size_t start = 0; start < n; start += kChunk) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(n, start + kChunk); ++i) idx.push_back(i);
        const Tensor x = data.batch(idx);
        const auto y = data.batch_labels(idx);
        ok_clean += correct(x, y);
        ok_pgd += correct(attacks::pgd(model, x, y, pgd, rng), y);
        ok_fgsm += correct(attacks::fgsm(model, x, y, fgsm), y);
        ok_train += correct(attacks::run_attack(model, x, y, spec.attack, rng), y);
    }
    const double scale = 100.0 / double(n);
    return {ok_clean * scale, ok_pgd * scale, ok_fgsm * scale, ok_train * scale};
}

void sgd_step(std::span<NamedParameter> params, std::span<const Tensor> grads, std::vector<double>& velocity,
              double lr, double momentum, double weight_decay) {
    std::size_t total = 0;
    for (const auto& p : params) total += p.value.numel();
    if (velocity.empty()) velocity.assign(total, 0.0);
    if (velocity.size() != total || grads.size() != params.size()) {
        throw std::invalid_argument("sgd_step: state does not match the parameters");
    }
    std::size_t off = 0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto w = params[k].value.mutable_data();
        const auto g = grads[k].data();
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double d = g[j] + weight_decay * w[j];
            double& v = velocity[off + j];
            v = momentum * v + d;
            w[j] -= lr * v;
        }
        off += w.size();
    }
}

Trainer::Trainer(Classifier model, const Dataset& train, const Dataset* heldout, TrainSpec spec,
                 telemetry::Options options)
    : model_(std::move(model)), train_(train), heldout_(heldout), spec_(std::move(spec)), options_(options) {
    spec_.validate();
    if (model_.num_classes() != train_.num_classes()) {
        throw std::invalid_argument("trainer: model has " + std::to_string(model_.num_classes()) +
                                    " classes, dataset " + std::to_string(train_.num_classes()));
    }
    if (model_.input_shape() != train_.sample_shape()) {
        throw ShapeError("trainer: model input " + shape_str(model_.input_shape()) + " vs data " +
                         shape_str(train_.sample_shape()));
    }
    if (heldout_ && heldout_->sample_shape() != train_.sample_shape()) {
        throw ShapeError("trainer: held-out split shape differs from the training split");
    }
    log_.run_id = to_string(spec_.method) + "-" + std::to_string(spec_.seed);
}

Trainer Trainer::resume(const Checkpoint& state, const std::optional<Checkpoint>& best, const Dataset& train,
                        const Dataset* heldout, TrainSpec spec, telemetry::Options options,
                        telemetry::TelemetryLog prior) {
    Trainer t(state.restore(), train, heldout, std::move(spec), options);
    if (state.seed != t.spec_.seed) throw std::invalid_argument("resume: checkpoint seed differs from the spec");
    if (state.epoch > t.spec_.epochs) throw std::invalid_argument("resume: checkpoint is past the last epoch");
    t.velocity_ = state.momentum;
    t.epoch_ = state.epoch;
    if (best) {
        t.best_ = best->restore();
        t.best_epoch_ = best->epoch;
        if (best->meta.contains("best_metric") && !best->meta["best_metric"].is_null()) {
            t.best_metric_ = best->meta["best_metric"].get<double>();
        }
    }
    if (!prior.run_id.empty()) t.log_ = std::move(prior);
    return t;
}

void Trainer::run_epoch() {
    if (done()) throw std::logic_error("trainer: all epochs already ran");
    const std::size_t e = epoch_;
    const std::size_t n = train_.size();
    const double lr = spec_.lr_at(e);

    auto order = iota(n);
    Rng shuffle_rng = make_rng(spec_.seed, "shuffle", e);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    std::vector<Tensor> params;
    for (const auto& p : model_.parameters()) params.push_back(p.value);

    std::vector<telemetry::SampleRecord> records;
    records.reserve(n);
    double loss_sum = 0.0, kl_c = 0.0, kl_m = 0.0, kl = 0.0, alp = 0.0;
    bool has_kl = false, has_alp = false;
    const std::size_t batches = (n + spec_.batch_size - 1) / spec_.batch_size;
    for (std::size_t b = 0; b < batches; ++b) {
        const std::size_t lo = b * spec_.batch_size, hi = std::min(n, lo + spec_.batch_size);
        const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
        const Tensor x = train_.batch(idx);
        const auto y = train_.batch_labels(idx);
        try {
            Rng attack_rng = make_rng(spec_.seed, "attack", e, b);
            const Tensor x_adv = attacks::run_attack(model_, x, y, spec_.attack, attack_rng);
            BatchOutcome out = batch_objective(model_, x, x_adv, y, spec_, e, options_.aae_objective_loss);
            const double loss = out.loss.item();
            if (!std::isfinite(loss)) throw DomainError("non-finite loss");
            const auto grads = grad(out.loss, params);
            for (const auto& g : grads) {
                for (double v : g.data()) {
                    if (!std::isfinite(v)) throw DomainError("non-finite gradient");
                }
            }
            sgd_step(model_.parameters(), grads, velocity_, lr, spec_.momentum, spec_.weight_decay);

            const double nb = double(idx.size());
            loss_sum += loss * nb;
            if (out.kl_mean) {
                has_kl = true;
                kl_c += *out.kl_conditional_mean * nb;
                kl_m += *out.kl_marginal_mean * nb;
                kl += *out.kl_mean * nb;
            }
            if (out.alp_term_mean) {
                has_alp = true;
                alp += *out.alp_term_mean * nb;
            }
            log_.batches.push_back({e + 1, b, loss, out.der_penalty_mean, out.aae_count, out.effective_scale});
            for (std::size_t i = 0; i < out.records.size(); ++i) {
                out.records[i].index = idx[i];
                records.push_back(out.records[i]);
            }
        } catch (const DomainError& err) {
            throw TrainingDiverged("training diverged in epoch " + std::to_string(e + 1) + ", batch " +
                                       std::to_string(b) + ": " + err.what(),
                                   checkpoint());
        }
    }
    std::sort(records.begin(), records.end(), [](const auto& a, const auto& c) { return a.index < c.index; });

    telemetry::EpochRow row = telemetry::summarize(e + 1, records);
    row.train_loss = loss_sum / double(n);
    row.lr = lr;
    if (has_kl) {
        row.kl_conditional_mean = kl_c / double(n);
        row.kl_marginal_mean = kl_m / double(n);
        row.kl_mean = kl / double(n);
    }
    if (has_alp) row.alp_term_mean = alp / double(n);
    if (heldout_ && spec_.eval.enabled) {
        Rng eval_rng = make_rng(spec_.seed, "eval", e);
        const EvalResult r = evaluate(model_, *heldout_, spec_, eval_rng);
        row.clean_test_acc = r.clean_acc;
        row.pgd_test_acc = r.pgd_acc;
        row.fgsm_test_acc = r.fgsm_acc;
        row.heldout_attack_acc = r.heldout_attack_acc;
        if (!best_metric_ || r.heldout_attack_acc > *best_metric_) {
            best_metric_ = r.heldout_attack_acc;
            best_epoch_ = e + 1;
            best_ = model_.clone();
        }
    }
    log_.append(row);

    const bool last = e + 1 == spec_.epochs;
    const bool periodic = options_.snapshot_every > 0 && (e + 1) % options_.snapshot_every == 0;
    if (last || periodic || options_.all_epochs) log_.snapshots.push_back({e + 1, std::move(records)});
    epoch_ = e + 1;
}

void Trainer::run(const std::function<void(const Trainer&)>& after_epoch) {
    while (!done()) {
        run_epoch();
        if (after_epoch) after_epoch(*this);
    }
}

Checkpoint Trainer::checkpoint() const {
    Checkpoint c = Checkpoint::of(model_);
    c.momentum = velocity_;
    c.seed = spec_.seed;
    c.epoch = epoch_;
    c.meta = {{"method", to_string(spec_.method)}, {"best_epoch", best_epoch_}};
    c.meta["best_metric"] = best_metric_ ? nlohmann::json(*best_metric_) : nlohmann::json(nullptr);
    return c;
}

std::optional<Checkpoint> Trainer::best_checkpoint() const {
    if (!best_) return std::nullopt;
    Checkpoint c = Checkpoint::of(*best_);
    c.seed = spec_.seed;
    c.epoch = best_epoch_;
    c.meta = {{"method", to_string(spec_.method)}, {"best_epoch", best_epoch_}, {"best_metric", *best_metric_}};
    return c;
}

TrainResult Trainer::result() const {
    TrainResult r{model_.clone(), velocity_, std::nullopt, best_epoch_, best_metric_, log_};
    if (best_) r.best = best_->clone();
    return r;
}

namespace {

TrainResult run_checked(Classifier model, const Dataset& train, const Dataset* heldout, const TrainSpec& spec,
                        telemetry::Options options, std::initializer_list<Method> allowed, const char* who) {
    if (std::find(allowed.begin(), allowed.end(), spec.method) == allowed.end()) {
        throw std::invalid_argument(std::string(who) + ": method " + to_string(spec.method) + " not handled here");
    }
    Trainer t(std::move(model), train, heldout, spec, options);
    t.run();
    return t.result();
}

}  // namespace

TrainResult train_sat(Classifier model, const Dataset& train, const Dataset* heldout, const TrainSpec& spec,
                      telemetry::Options options) {
    return run_checked(std::move(model), train, heldout, spec, options, {Method::sat}, "train_sat");
}

TrainResult train_trades(Classifier model, const Dataset& train, const Dataset* heldout, const TrainSpec& spec,
                         telemetry::Options options) {
    return run_checked(std::move(model), train, heldout, spec, options, {Method::trades}, "train_trades");
}

TrainResult train_der(Classifier model, const Dataset& train, const Dataset* heldout, const TrainSpec& spec,
                      telemetry::Options options) {
    return run_checked(std::move(model), train, heldout, spec, options, {Method::der_single, Method::der_multi},
                       "train_der");
}

TrainResult train_alp_or_klouter(Classifier model, const Dataset& train, const Dataset* heldout,
                                 const TrainSpec& spec, telemetry::Options options) {
    return run_checked(std::move(model), train, heldout, spec, options, {Method::alp, Method::kl_outer},
                       "train_alp_or_klouter");
}

TrainResult train_weighted_ce(Classifier model, const Dataset& train, const Dataset* heldout,
                              const TrainSpec& spec, telemetry::Options options) {
    return run_checked(std::move(model), train, heldout, spec, options, {Method::weighted_ce}, "train_weighted_ce");
}

TrainResult train(Classifier model, const Dataset& train, const Dataset* heldout, const TrainSpec& spec,
                  telemetry::Options options) {
    Trainer t(std::move(model), train, heldout, spec, options);
    t.run();
    return t.result();
}

}  // namespace elat::training
