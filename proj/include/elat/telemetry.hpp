#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "elat/data.hpp"
#include "elat/energy.hpp"
#include "elat/models.hpp"

namespace elat::telemetry {

/// One training sample as seen during an epoch.
struct SampleRecord {
    std::size_t index = 0;  // row in the training set
    std::size_t label = 0;
    energy::EnergyRecord energy;
    double loss_clean = 0.0;  // CE, or the attack objective when so configured
    double loss_adv = 0.0;
    std::size_t pred_clean = 0;
    std::size_t pred_adv = 0;
    bool is_aae = false;
    double der_penalty = 0.0;  // penalty actually applied to this sample
};

/// Accuracies are percentages in [0,100].
struct EpochRow {
    std::size_t epoch = 0;  // completed epochs, 1-based
    double clean_train_acc = 0.0;
    double adv_train_acc = 0.0;
    std::optional<double> clean_test_acc;
    std::optional<double> pgd_test_acc;
    std::optional<double> fgsm_test_acc;
    std::optional<double> heldout_attack_acc;
    double mean_delta_e_x = 0.0;
    double mean_delta_e_xy = 0.0;
    double mean_shift_norm = 0.0;
    double median_delta_e_x = 0.0;
    double median_delta_e_xy = 0.0;
    std::size_t aae_count = 0;
    std::optional<double> mean_e_x_aae;
    std::optional<double> mean_e_x_nae;
    double der_penalty_mean = 0.0;
    double train_loss = 0.0;
    double lr = 0.0;
    std::optional<double> kl_conditional_mean;
    std::optional<double> kl_marginal_mean;
    std::optional<double> kl_mean;
    std::optional<double> alp_term_mean;
};

struct BatchRow {
    std::size_t epoch = 0;
    std::size_t batch = 0;
    double loss = 0.0;
    double der_penalty = 0.0;  // mean applied penalty over the batch
    std::size_t aae_count = 0;
    double effective_scale = 1.0;  // weighted_ce: sum(w)/n or 1/n * n
};

struct Snapshot {
    std::size_t epoch = 0;
    std::vector<SampleRecord> samples;  // sorted by index
};

struct TelemetryLog {
    std::string run_id;
    std::vector<EpochRow> epochs;
    std::vector<Snapshot> snapshots;
    std::vector<BatchRow> batches;

    /// Rejects rows whose epoch does not strictly increase.
    void append(EpochRow row);
};

struct Thresholds {
    double co_pgd_floor = 5.0;
    double co_fgsm_ceiling = 70.0;
    double ro_drop = 3.0;
    std::size_t ro_window = 10;
};

struct Options {
    std::size_t snapshot_every = 5;  // 0 disables periodic snapshots; the final epoch is always kept
    bool all_epochs = false;
    bool aae_objective_loss = false;
    Thresholds thresholds;
};

/// mask[i] = loss_adv[i] < loss_clean[i].
std::vector<bool> detect_aae(std::span<const double> loss_clean, std::span<const double> loss_adv);

/// Train-side aggregates of one epoch's records (test-side fields untouched).
EpochRow summarize(std::size_t epoch, std::span<const SampleRecord> records);

struct QuiverRow {
    double e_x, e_xy, e_xadv, e_xadv_y, shift_norm;
    bool is_aae;
};
std::vector<QuiverRow> quiver_export(const Snapshot& snapshot);

/// Index into the series of the first collapse; see Thresholds.
std::optional<std::size_t> detect_co(std::span<const double> pgd_test, std::span<const double> fgsm_test,
                                     const Thresholds& t);
/// Index of the first epoch of a decline of more than ro_drop in test
/// robustness, within ro_window epochs, over which train robustness does not
/// decrease.
std::optional<std::size_t> detect_ro(std::span<const double> adv_train, std::span<const double> pgd_test,
                                     const Thresholds& t);
/// Same detectors over a log; return the epoch number of the firing row.
/// Rows without test evaluations are skipped.
std::optional<std::size_t> detect_co(const TelemetryLog& log, const Thresholds& t);
std::optional<std::size_t> detect_ro(const TelemetryLog& log, const Thresholds& t);

struct ClassSample {
    std::size_t index = 0;
    std::size_t label = 0;
    double e_x = 0.0;
    double p_y = 0.0;      // p(label | x)
    double entropy = 0.0;  // nats
};
struct ClassStats {
    std::size_t cls = 0;
    std::size_t count = 0;
    std::optional<double> mean_e_x;
    std::optional<double> mean_error;  // 1 - p(y|x)
    std::optional<double> mean_entropy;
};
std::vector<ClassSample> class_samples(const Classifier& model, const Dataset& data);
std::vector<ClassStats> aggregate_class_stats(std::span<const ClassSample> samples, std::size_t num_classes);
std::vector<ClassStats> per_class_stats(const Classifier& model, const Dataset& data);

// CSV exports. Column names are part of the interface.
void write_epochs_csv(const std::filesystem::path& path, std::span<const EpochRow> rows);
std::vector<EpochRow> read_epochs_csv(const std::filesystem::path& path);
void write_batches_csv(const std::filesystem::path& path, std::span<const BatchRow> rows);
void write_snapshot_csv(const std::filesystem::path& path, const Snapshot& snapshot);
Snapshot read_snapshot_csv(const std::filesystem::path& path, std::size_t epoch);
void write_quiver_csv(const std::filesystem::path& path, const Snapshot& snapshot);
void write_class_samples_csv(const std::filesystem::path& path, std::span<const ClassSample> samples);
std::vector<ClassSample> read_class_samples_csv(const std::filesystem::path& path);
void write_per_class_csv(const std::filesystem::path& path, std::span<const ClassStats> rows);

}  // namespace elat::telemetry
