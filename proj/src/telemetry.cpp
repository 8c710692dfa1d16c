#include "elat/telemetry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "elat/csv.hpp"

namespace elat::telemetry {

namespace {

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

void require_same_length(std::size_t a, std::size_t b, const char* what) {
    if (a != b) {
        throw std::invalid_argument(std::string(what) + ": series lengths differ (" + std::to_string(a) + " vs " +
                                    std::to_string(b) + ")");
    }
}

const std::vector<std::string> kEpochColumns = {
    "epoch",          "clean_train_acc",     "adv_train_acc",    "clean_test_acc",   "pgd_test_acc",
    "fgsm_test_acc",  "heldout_attack_acc",  "mean_delta_e_x",   "mean_delta_e_xy",  "mean_shift_norm",
    "median_delta_e_x", "median_delta_e_xy", "aae_count",        "mean_e_x_aae",     "mean_e_x_nae",
    "der_penalty_mean", "train_loss",        "lr",               "kl_conditional_mean", "kl_marginal_mean",
    "kl_mean",        "alp_term_mean"};

const std::vector<std::string> kSnapshotColumns = {
    "index",    "label",      "e_x",      "e_xy",       "e_xadv",     "e_xadv_y", "delta_e_x", "delta_e_xy",
    "shift_norm", "loss_clean", "loss_adv", "pred_clean", "pred_adv", "is_aae",   "der_penalty"};

}  // namespace

void TelemetryLog::append(EpochRow row) {
    if (!epochs.empty() && row.epoch <= epochs.back().epoch) {
        throw std::logic_error("telemetry: epoch rows must strictly increase");
    }
    epochs.push_back(std::move(row));
}

std::vector<bool> detect_aae(std::span<const double> loss_clean, std::span<const double> loss_adv) {
    require_same_length(loss_clean.size(), loss_adv.size(), "detect_aae");
    std::vector<bool> mask(loss_clean.size());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = loss_adv[i] < loss_clean[i];
    return mask;
}

EpochRow summarize(std::size_t epoch, std::span<const SampleRecord> records) {
    EpochRow row;
    row.epoch = epoch;
    if (records.empty()) return row;
    const double n = double(records.size());
    std::size_t clean_ok = 0, adv_ok = 0, n_aae = 0;
    double s_dx = 0, s_dxy = 0, s_norm = 0, s_pen = 0, s_aae = 0, s_nae = 0;
    std::vector<double> dx, dxy;
    for (const auto& r : records) {
        clean_ok += r.pred_clean == r.label;
        adv_ok += r.pred_adv == r.label;
        s_dx += r.energy.delta_e_x;
        s_dxy += r.energy.delta_e_xy;
        s_norm += r.energy.shift_norm;
        s_pen += r.der_penalty;
        dx.push_back(r.energy.delta_e_x);
        dxy.push_back(r.energy.delta_e_xy);
        if (r.is_aae) {
            ++n_aae;
            s_aae += r.energy.e_x;
        } else {
            s_nae += r.energy.e_x;
        }
    }
    row.clean_train_acc = 100.0 * double(clean_ok) / n;
    row.adv_train_acc = 100.0 * double(adv_ok) / n;
    row.mean_delta_e_x = s_dx / n;
    row.mean_delta_e_xy = s_dxy / n;
    row.mean_shift_norm = s_norm / n;
    row.median_delta_e_x = median(std::move(dx));
    row.median_delta_e_xy = median(std::move(dxy));
    row.aae_count = n_aae;
    if (n_aae > 0) row.mean_e_x_aae = s_aae / double(n_aae);
    if (n_aae < records.size()) row.mean_e_x_nae = s_nae / double(records.size() - n_aae);
    row.der_penalty_mean = s_pen / n;
    return row;
}

std::vector<QuiverRow> quiver_export(const Snapshot& snapshot) {
    std::vector<QuiverRow> rows;
    rows.reserve(snapshot.samples.size());
    for (const auto& s : snapshot.samples) {
        rows.push_back({s.energy.e_x, s.energy.e_xy, s.energy.e_xadv, s.energy.e_xadv_y, s.energy.shift_norm,
                        s.is_aae});
    }
    return rows;
}

std::optional<std::size_t> detect_co(std::span<const double> pgd_test, std::span<const double> fgsm_test,
                                     const Thresholds& t) {
    require_same_length(pgd_test.size(), fgsm_test.size(), "detect_co");
    for (std::size_t e = 1; e < pgd_test.size(); ++e) {
        if (pgd_test[e] < t.co_pgd_floor && fgsm_test[e] > t.co_fgsm_ceiling && pgd_test[e - 1] >= t.co_pgd_floor) {
            return e;
        }
    }
    return std::nullopt;
}

std::optional<std::size_t> detect_ro(std::span<const double> adv_train, std::span<const double> pgd_test,
                                     const Thresholds& t) {
    require_same_length(adv_train.size(), pgd_test.size(), "detect_ro");
    const std::size_t n = pgd_test.size();
    for (std::size_t s = 0; s + 1 < n; ++s) {
        for (std::size_t e = s + 1; e < n && e - s <= t.ro_window; ++e) {
            if (adv_train[e] < adv_train[e - 1]) break;
            if (pgd_test[s] - pgd_test[e] > t.ro_drop) return s + 1;
        }
    }
    return std::nullopt;
}

namespace {

struct Series {
    std::vector<std::size_t> epoch;
    std::vector<double> a, b;
};

}  // namespace

std::optional<std::size_t> detect_co(const TelemetryLog& log, const Thresholds& t) {
    Series s;
    for (const auto& r : log.epochs) {
        if (!r.pgd_test_acc || !r.fgsm_test_acc) continue;
        s.epoch.push_back(r.epoch);
        s.a.push_back(*r.pgd_test_acc);
        s.b.push_back(*r.fgsm_test_acc);
    }
    auto i = detect_co(s.a, s.b, t);
    return i ? std::optional<std::size_t>(s.epoch[*i]) : std::nullopt;
}

std::optional<std::size_t> detect_ro(const TelemetryLog& log, const Thresholds& t) {
    Series s;
    for (const auto& r : log.epochs) {
        if (!r.pgd_test_acc) continue;
        s.epoch.push_back(r.epoch);
        s.a.push_back(r.adv_train_acc);
        s.b.push_back(*r.pgd_test_acc);
    }
    auto i = detect_ro(s.a, s.b, t);
    return i ? std::optional<std::size_t>(s.epoch[*i]) : std::nullopt;
}

std::vector<ClassSample> class_samples(const Classifier& model, const Dataset& data) {
    NoGradGuard no_grad;
    const std::size_t k = model.num_classes();
    constexpr std::size_t kChunk = 256;
    std::vector<ClassSample> out;
    out.reserve(data.size());
    for (std::size_t start = 0; start < data.size(); start += kChunk) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(data.size(), start + kChunk); ++i) idx.push_back(i);
        const Tensor z = model.logits(data.batch(idx));
        for (std::size_t r = 0; r < idx.size(); ++r) {
            std::span<const double> row = z.data().subspan(r * k, k);
            const double e_x = energy::marginal_energy(row);  // = -lse
            ClassSample s;
            s.index = idx[r];
            s.label = data.label(idx[r]);
            s.e_x = e_x;
            s.p_y = std::exp(row[s.label] + e_x);
            double h = 0.0;
            for (double zk : row) {
                const double log_p = zk + e_x;
                h -= std::exp(log_p) * log_p;
            }
            s.entropy = h;
            out.push_back(s);
        }
    }
    return out;
}

std::vector<ClassStats> aggregate_class_stats(std::span<const ClassSample> samples, std::size_t num_classes) {
    std::vector<ClassStats> rows(num_classes);
    std::vector<double> se(num_classes, 0.0), serr(num_classes, 0.0), sh(num_classes, 0.0);
    for (std::size_t c = 0; c < num_classes; ++c) rows[c].cls = c;
    for (const auto& s : samples) {
        if (s.label >= num_classes) throw std::out_of_range("aggregate_class_stats: label out of range");
        ++rows[s.label].count;
        se[s.label] += s.e_x;
        serr[s.label] += 1.0 - s.p_y;
        sh[s.label] += s.entropy;
    }
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (rows[c].count == 0) continue;
        const double n = double(rows[c].count);
        rows[c].mean_e_x = se[c] / n;
        rows[c].mean_error = serr[c] / n;
        rows[c].mean_entropy = sh[c] / n;
    }
    return rows;
}

std::vector<ClassStats> per_class_stats(const Classifier& model, const Dataset& data) {
    if (model.num_classes() != data.num_classes()) {
        throw std::invalid_argument("per_class_stats: model and dataset class counts differ");
    }
    return aggregate_class_stats(class_samples(model, data), data.num_classes());
}

void write_epochs_csv(const std::filesystem::path& path, std::span<const EpochRow> rows) {
    csv::Writer w(path, kEpochColumns);
    for (const auto& r : rows) {
        w.cell(r.epoch).cell(r.clean_train_acc).cell(r.adv_train_acc).cell(r.clean_test_acc).cell(r.pgd_test_acc);
        w.cell(r.fgsm_test_acc).cell(r.heldout_attack_acc).cell(r.mean_delta_e_x).cell(r.mean_delta_e_xy);
        w.cell(r.mean_shift_norm).cell(r.median_delta_e_x).cell(r.median_delta_e_xy).cell(r.aae_count);
        w.cell(r.mean_e_x_aae).cell(r.mean_e_x_nae).cell(r.der_penalty_mean).cell(r.train_loss).cell(r.lr);
        w.cell(r.kl_conditional_mean).cell(r.kl_marginal_mean).cell(r.kl_mean).cell(r.alp_term_mean);
        w.end_row();
    }
}

std::vector<EpochRow> read_epochs_csv(const std::filesystem::path& path) {
    const auto t = csv::read(path);
    std::vector<EpochRow> rows;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        EpochRow r;
        r.epoch = t.count(i, "epoch");
        r.clean_train_acc = t.number(i, "clean_train_acc");
        r.adv_train_acc = t.number(i, "adv_train_acc");
        r.clean_test_acc = t.maybe_number(i, "clean_test_acc");
        r.pgd_test_acc = t.maybe_number(i, "pgd_test_acc");
        r.fgsm_test_acc = t.maybe_number(i, "fgsm_test_acc");
        r.heldout_attack_acc = t.maybe_number(i, "heldout_attack_acc");
        r.mean_delta_e_x = t.number(i, "mean_delta_e_x");
        r.mean_delta_e_xy = t.number(i, "mean_delta_e_xy");
        r.mean_shift_norm = t.number(i, "mean_shift_norm");
        r.median_delta_e_x = t.number(i, "median_delta_e_x");
        r.median_delta_e_xy = t.number(i, "median_delta_e_xy");
        r.aae_count = t.count(i, "aae_count");
        r.mean_e_x_aae = t.maybe_number(i, "mean_e_x_aae");
        r.mean_e_x_nae = t.maybe_number(i, "mean_e_x_nae");
        r.der_penalty_mean = t.number(i, "der_penalty_mean");
        r.train_loss = t.number(i, "train_loss");
        r.lr = t.number(i, "lr");
        r.kl_conditional_mean = t.maybe_number(i, "kl_conditional_mean");
        r.kl_marginal_mean = t.maybe_number(i, "kl_marginal_mean");
        r.kl_mean = t.maybe_number(i, "kl_mean");
        r.alp_term_mean = t.maybe_number(i, "alp_term_mean");
        rows.push_back(r);
    }
    return rows;
}

void write_batches_csv(const std::filesystem::path& path, std::span<const BatchRow> rows) {
    csv::Writer w(path, {"epoch", "batch", "loss", "der_penalty", "aae_count", "effective_scale"});
    for (const auto& r : rows) {
        w.cell(r.epoch).cell(r.batch).cell(r.loss).cell(r.der_penalty).cell(r.aae_count).cell(r.effective_scale);
        w.end_row();
    }
}

void write_snapshot_csv(const std::filesystem::path& path, const Snapshot& snapshot) {
    csv::Writer w(path, kSnapshotColumns);
    for (const auto& s : snapshot.samples) {
        const auto& e = s.energy;
        w.cell(s.index).cell(s.label).cell(e.e_x).cell(e.e_xy).cell(e.e_xadv).cell(e.e_xadv_y);
        w.cell(e.delta_e_x).cell(e.delta_e_xy).cell(e.shift_norm).cell(s.loss_clean).cell(s.loss_adv);
        w.cell(s.pred_clean).cell(s.pred_adv).cell(s.is_aae).cell(s.der_penalty);
        w.end_row();
    }
}

Snapshot read_snapshot_csv(const std::filesystem::path& path, std::size_t epoch) {
    const auto t = csv::read(path);
    Snapshot snap;
    snap.epoch = epoch;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        SampleRecord s;
        s.index = t.count(i, "index");
        s.label = t.count(i, "label");
        s.energy.e_x = t.number(i, "e_x");
        s.energy.e_xy = t.number(i, "e_xy");
        s.energy.e_xadv = t.number(i, "e_xadv");
        s.energy.e_xadv_y = t.number(i, "e_xadv_y");
        s.energy.delta_e_x = t.number(i, "delta_e_x");
        s.energy.delta_e_xy = t.number(i, "delta_e_xy");
        s.energy.shift_norm = t.number(i, "shift_norm");
        s.loss_clean = t.number(i, "loss_clean");
        s.loss_adv = t.number(i, "loss_adv");
        s.pred_clean = t.count(i, "pred_clean");
        s.pred_adv = t.count(i, "pred_adv");
        s.is_aae = t.count(i, "is_aae") != 0;
        s.der_penalty = t.number(i, "der_penalty");
        snap.samples.push_back(s);
    }
    return snap;
}

void write_quiver_csv(const std::filesystem::path& path, const Snapshot& snapshot) {
    csv::Writer w(path, {"e_x", "e_xy", "e_xadv", "e_xadv_y", "shift_norm", "is_aae"});
    for (const auto& q : quiver_export(snapshot)) {
        w.cell(q.e_x).cell(q.e_xy).cell(q.e_xadv).cell(q.e_xadv_y).cell(q.shift_norm).cell(q.is_aae);
        w.end_row();
    }
}

void write_class_samples_csv(const std::filesystem::path& path, std::span<const ClassSample> samples) {
    csv::Writer w(path, {"index", "label", "e_x", "p_y", "entropy"});
    for (const auto& s : samples) {
        w.cell(s.index).cell(s.label).cell(s.e_x).cell(s.p_y).cell(s.entropy);
        w.end_row();
    }
}

std::vector<ClassSample> read_class_samples_csv(const std::filesystem::path& path) {
    const auto t = csv::read(path);
    std::vector<ClassSample> out;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        out.push_back({t.count(i, "index"), t.count(i, "label"), t.number(i, "e_x"), t.number(i, "p_y"),
                       t.number(i, "entropy")});
    }
    return out;
}

void write_per_class_csv(const std::filesystem::path& path, std::span<const ClassStats> rows) {
    csv::Writer w(path, {"class", "count", "mean_e_x", "mean_error", "mean_entropy"});
    for (const auto& r : rows) {
        w.cell(r.cls).cell(r.count).cell(r.mean_e_x).cell(r.mean_error).cell(r.mean_entropy);
        w.end_row();
    }
}

}  // namespace elat::telemetry
