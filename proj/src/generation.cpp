#include "elat/generation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <Eigen/Dense>

#include "elat/csv.hpp"
#include "elat/energy.hpp"
#include "elat/ops.hpp"

namespace elat::generation {

namespace {

constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

void require(bool ok, const std::string& field, const std::string& why) {
    if (!ok) throw std::invalid_argument("gen." + field + ": " + why);
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

Shape with_batch(const Shape& sample) {
    Shape s{1};
    s.insert(s.end(), sample.begin(), sample.end());
    return s;
}

}  // namespace

void GenSpec::validate() const {
    require(k_nn >= 1, "k_nn", "must be >= 1");
    require(retained_variance > 0.0 && retained_variance <= 1.0, "retained_variance", "must be in (0,1]");
    require(sigma_pca > 0.0 && std::isfinite(sigma_pca), "sigma_pca", "must be > 0");
    require(phi >= 0.0 && std::isfinite(phi), "phi", "must be >= 0");
    require(zeta >= 0.0 && zeta < 1.0, "zeta", "must be in [0,1)");
    require(eta >= 0.0 && std::isfinite(eta), "eta", "must be >= 0");
    require(noise_var >= 0.0 && std::isfinite(noise_var), "noise_var", "must be >= 0");
}

nlohmann::json GenSpec::to_json() const {
    return {{"target_class", target_class}, {"k_nn", k_nn},           {"retained_variance", retained_variance},
            {"sigma_pca", sigma_pca},       {"phi", phi},             {"zeta", zeta},
            {"eta", eta},                   {"noise_var", noise_var}, {"max_iters", max_iters},
            {"normalize_lambda", normalize_lambda}, {"seed", seed}};
}

GenSpec GenSpec::from_json(const nlohmann::json& j) {
    GenSpec s;
    s.target_class = j.value("target_class", s.target_class);
    s.k_nn = j.value("k_nn", s.k_nn);
    s.retained_variance = j.value("retained_variance", s.retained_variance);
    s.sigma_pca = j.value("sigma_pca", s.sigma_pca);
    s.phi = j.value("phi", s.phi);
    s.zeta = j.value("zeta", s.zeta);
    s.eta = j.value("eta", s.eta);
    s.noise_var = j.value("noise_var", s.noise_var);
    s.max_iters = j.value("max_iters", s.max_iters);
    s.normalize_lambda = j.value("normalize_lambda", s.normalize_lambda);
    s.seed = j.value("seed", s.seed);
    return s;
}

double ssim(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.empty()) {
        throw ShapeError("ssim: images of " + std::to_string(a.size()) + " and " + std::to_string(b.size()) +
                         " values");
    }
    const double n = double(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double va = 0.0, vb = 0.0, cov = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        va += da * da;
        vb += db * db;
        cov += da * db;
    }
    va /= n;
    vb /= n;
    cov /= n;
    return ((2.0 * ma * mb + kC1) * (2.0 * cov + kC2)) / ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
}

Neighbours select_knn(std::span<const double> x0, const Dataset& data, std::size_t cls, std::size_t k) {
    if (cls >= data.num_classes()) throw std::out_of_range("select_knn: class " + std::to_string(cls));
    const auto members = data.class_indices(cls);
    if (k == 0 || members.size() < k) {
        throw GenerationError("select_knn: class " + std::to_string(cls) + " has " +
                              std::to_string(members.size()) + " samples, need " + std::to_string(k));
    }
    std::vector<std::pair<double, std::size_t>> scored;
    scored.reserve(members.size());
    for (std::size_t i : members) scored.emplace_back(ssim(x0, data.sample(i)), i);
    std::partial_sort(scored.begin(), scored.begin() + std::ptrdiff_t(k), scored.end(), [](const auto& p, const auto& q) {
        return p.first != q.first ? p.first > q.first : p.second < q.second;
    });
    Neighbours out;
    for (std::size_t j = 0; j < k; ++j) {
        out.indices.push_back(scored[j].second);
        out.scores.push_back(scored[j].first);
    }
    return out;
}

LocalPca fit_local_pca(const std::vector<std::vector<double>>& cluster, double retained_variance) {
    if (cluster.empty()) throw GenerationError("local PCA: empty cluster");
    const std::size_t k = cluster.size(), d = cluster.front().size();
    Eigen::MatrixXd m(k, d);
    for (std::size_t r = 0; r < k; ++r) {
        if (cluster[r].size() != d) throw ShapeError("local PCA: cluster images differ in size");
        for (std::size_t c = 0; c < d; ++c) m(Eigen::Index(r), Eigen::Index(c)) = cluster[r][c];
    }
    const Eigen::RowVectorXd mean = m.colwise().mean();
    m.rowwise() -= mean;

    LocalPca pca;
    pca.mean.assign(mean.data(), mean.data() + d);
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinV);
    const Eigen::VectorXd s = svd.singularValues();
    pca.singular_values.assign(s.data(), s.data() + s.size());
    pca.total_variance = s.squaredNorm();
    if (!(pca.total_variance > 1e-20 * double(d))) {
        pca.degenerate = true;
        return pca;
    }
    double cum = 0.0;
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        const double frac = s(i) * s(i) / pca.total_variance;
        pca.explained.push_back(frac);
        const Eigen::VectorXd u = svd.matrixV().col(i);
        pca.components.emplace_back(u.data(), u.data() + d);
        cum += frac;
        if (cum >= retained_variance - 1e-12) break;
    }
    return pca;
}

std::vector<double> reconstruct(const LocalPca& pca, std::span<const double> x) {
    std::vector<double> out = pca.mean;
    for (const auto& u : pca.components) {
        double c = 0.0;
        for (std::size_t j = 0; j < x.size(); ++j) c += (x[j] - pca.mean[j]) * u[j];
        for (std::size_t j = 0; j < x.size(); ++j) out[j] += c * u[j];
    }
    return out;
}

PcaInit local_pca_init(const std::vector<std::vector<double>>& cluster, const GenSpec& spec, Rng& rng) {
    const LocalPca pca = fit_local_pca(cluster, spec.retained_variance);
    PcaInit init;
    init.x0 = pca.mean;
    if (pca.degenerate) {
        init.warning = "local PCA: cluster has zero variance, starting from its mean";
        for (double& v : init.x0) v = clamp01(v);
        return init;
    }
    const double k = double(cluster.size());
    std::normal_distribution<double> normal(0.0, spec.sigma_pca);
    for (std::size_t i = 0; i < pca.components.size(); ++i) {
        const double lambda = spec.normalize_lambda ? pca.singular_values[i] / std::sqrt(k - 1.0)
                                                    : pca.singular_values[i];
        const double alpha = normal(rng);
        init.lambda.push_back(lambda);
        init.alpha.push_back(alpha);
        const auto& u = pca.components[i];
        for (std::size_t j = 0; j < init.x0.size(); ++j) init.x0[j] += lambda * alpha * u[j];
    }
    for (double& v : init.x0) v = clamp01(v);
    return init;
}

InversionLoss inversion_loss(const Tensor& logits, std::size_t target, double phi) {
    if (logits.rank() != 2 || logits.dim(1) < 2) {
        throw ShapeError("inversion_loss: need logits [N,K] with K >= 2, got " + shape_str(logits.shape()));
    }
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    if (target >= k) throw std::out_of_range("inversion_loss: target class " + std::to_string(target));
    InversionLoss out;
    out.rival.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = target == 0 ? 1 : 0;
        for (std::size_t c = 0; c < k; ++c) {
            if (c != target && logits[i * k + c] > logits[i * k + best]) best = c;
        }
        out.rival[i] = best;
    }
    const std::vector<std::size_t> targets(n, target);
    out.loss = ops::mean(ops::sub(energy::joint_energy(logits, targets),
                                  ops::scale(energy::joint_energy(logits, out.rival), phi)));
    return out;
}

InversionLoss inversion_loss(const Classifier& model, const Tensor& x, std::size_t target, double phi) {
    return inversion_loss(model.logits(x), target, phi);
}

double ClassEnergyStats::threshold(std::size_t cls) const {
    if (cls >= classes.size() || !classes[cls]) {
        throw GenerationError("no energy statistics for class " + std::to_string(cls));
    }
    return classes[cls]->mean - classes[cls]->stddev;
}

ClassEnergyStats class_energy_stats(const Classifier& model, const Dataset& data) {
    const std::size_t k = data.num_classes();
    if (model.num_classes() != k) {
        throw std::invalid_argument("class_energy_stats: model has " + std::to_string(model.num_classes()) +
                                    " classes, dataset " + std::to_string(k));
    }
    std::vector<std::vector<double>> energies(k);
    constexpr std::size_t kChunk = 256;
    NoGradGuard no_grad;
    for (std::size_t start = 0; start < data.size(); start += kChunk) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(data.size(), start + kChunk); ++i) idx.push_back(i);
        const Tensor z = model.logits(data.batch(idx));
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const std::size_t y = data.label(idx[r]);
            energies[y].push_back(energy::joint_energy(z.data().subspan(r * k, k), y));
        }
    }
    ClassEnergyStats stats;
    stats.classes.resize(k);
    for (std::size_t c = 0; c < k; ++c) {
        const auto& e = energies[c];
        if (e.empty()) continue;
        double mean = 0.0;
        for (double v : e) mean += v;
        mean /= double(e.size());
        double var = 0.0;
        for (double v : e) var += (v - mean) * (v - mean);
        stats.classes[c] = ClassEnergy{mean, std::sqrt(var / double(e.size())), e.size()};
    }
    return stats;
}

GenResult sgld_generate(const Classifier& model, const GenSpec& spec, const ClassEnergyStats& stats,
                        std::span<const double> x0, Rng& rng) {
    spec.validate();
    const Shape batch_shape = with_batch(model.input_shape());
    if (x0.size() != shape_numel(batch_shape)) {
        throw ShapeError("sgld_generate: start image has " + std::to_string(x0.size()) + " values, model expects " +
                         shape_str(model.input_shape()));
    }
    const std::size_t target = spec.target_class;
    const double threshold = stats.threshold(target);
    const std::size_t k = model.num_classes();

    GenResult res;
    std::vector<double> x(x0.begin(), x0.end()), nu(x.size(), 0.0);
    for (double& v : x) v = clamp01(v);
    std::normal_distribution<double> noise(0.0, std::sqrt(spec.noise_var));
    for (std::size_t n = 0;; ++n) {
        Tensor xt = Tensor::from(batch_shape, x);
        xt.set_requires_grad(true);
        std::vector<double> g;
        try {
            const Tensor z = model.logits(xt);
            const InversionLoss inv = inversion_loss(z, target, spec.phi);
            const auto row = z.data().subspan(0, k);
            res.trace.push_back({n, energy::joint_energy(row, target), energy::joint_energy(row, inv.rival[0])});
            if (res.trace.back().e_target < threshold) {
                res.reached_threshold = true;
                res.iterations = n;
                break;
            }
            if (n == spec.max_iters) {
                res.iterations = n;
                break;
            }
            const Tensor gt = grad(inv.loss, xt);
            g.assign(gt.data().begin(), gt.data().end());
        } catch (const DomainError& e) {
            throw GenerationDiverged("sgld_generate: step " + std::to_string(n) + ": " + e.what(), res.trace);
        }
        for (std::size_t j = 0; j < x.size(); ++j) {
            if (!std::isfinite(g[j])) {
                throw GenerationDiverged("sgld_generate: non-finite gradient at step " + std::to_string(n), res.trace);
            }
            nu[j] = spec.zeta * nu[j] - 0.5 * spec.eta * g[j];
            const double eps = spec.noise_var > 0.0 ? noise(rng) : 0.0;
            x[j] = clamp01(x[j] + nu[j] + eps);
        }
    }
    res.image = std::move(x);
    return res;
}

std::vector<GeneratedSample> generate_class(const Classifier& model, const Dataset& data,
                                            const ClassEnergyStats& stats, const GenSpec& spec,
                                            std::size_t count) {
    spec.validate();
    if (model.input_shape() != data.sample_shape()) {
        throw ShapeError("generate: model input " + shape_str(model.input_shape()) + " vs data " +
                         shape_str(data.sample_shape()));
    }
    const auto members = data.class_indices(spec.target_class);
    if (members.empty()) throw GenerationError("generate: class " + std::to_string(spec.target_class) + " is empty");
    std::vector<GeneratedSample> out;
    out.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
        Rng rng = make_rng(spec.seed, "generate", spec.target_class, s);
        GeneratedSample g;
        g.start_index = members[std::uniform_int_distribution<std::size_t>(0, members.size() - 1)(rng)];
        g.cluster = select_knn(data.sample(g.start_index), data, spec.target_class, spec.k_nn);
        std::vector<std::vector<double>> cluster;
        for (std::size_t i : g.cluster.indices) {
            const auto px = data.sample(i);
            cluster.emplace_back(px.begin(), px.end());
        }
        g.init = local_pca_init(cluster, spec, rng);
        g.result = sgld_generate(model, spec, stats, g.init.x0, rng);
        out.push_back(std::move(g));
    }
    return out;
}

void write_image(const std::filesystem::path& path, std::span<const double> image, const Shape& shape) {
    if (shape.size() != 3 || (shape[0] != 1 && shape[0] != 3) || shape_numel(shape) != image.size()) {
        throw ShapeError("write_image: need [1|3,H,W] matching the pixel count, got " + shape_str(shape));
    }
    const std::size_t c = shape[0], h = shape[1], w = shape[2];
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << (c == 1 ? "P5" : "P6") << '\n' << w << ' ' << h << "\n255\n";
    for (std::size_t p = 0; p < h * w; ++p) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            out.put(char(static_cast<unsigned char>(std::lround(clamp01(image[ch * h * w + p]) * 255.0))));
        }
    }
}

Image read_image(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    in.get();
    if ((magic != "P5" && magic != "P6") || maxval != 255 || !in) {
        throw std::runtime_error(path.string() + ": not an 8-bit binary PGM/PPM");
    }
    const std::size_t c = magic == "P5" ? 1 : 3;
    Image img{{c, h, w}, std::vector<double>(c * h * w)};
    for (std::size_t p = 0; p < h * w; ++p) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const int v = in.get();
            if (v == EOF) throw std::runtime_error(path.string() + ": truncated pixel data");
            img.pixels[ch * h * w + p] = double(v) / 255.0;
        }
    }
    return img;
}

void write_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> trace) {
    csv::Writer w(path, {"iter", "e_target", "e_rival"});
    for (const auto& r : trace) w.cell(r.iter).cell(r.e_target).cell(r.e_rival).end_row();
}

}  // namespace elat::generation
