#include "elat/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "elat/csv.hpp"
#include "elat/random.hpp"

namespace elat::config {

namespace {

namespace pt = boost::property_tree;
using attacks::AttackKind;
using attacks::AttackSpec;

const std::map<std::string, std::set<std::string>>& schema() {
    static const std::map<std::string, std::set<std::string>> s = {
        {"", {"seed", "output_dir"}},
        {"data",
         {"source", "n", "noise", "classes", "n_per_class", "size", "images", "labels", "digits", "per_class",
          "test_fraction"}},
        {"model", {"arch"}},
        {"attack",
         {"kind", "epsilon", "alpha", "steps", "restarts", "target", "he_lambda", "n_fgsm_k", "clip_input",
          "random_start"}},
        {"train",
         {"method", "epochs", "batch_size", "lr_schedule", "momentum", "weight_decay", "beta", "gamma",
          "der_start_epoch", "trades_beta", "w_correct", "w_incorrect", "weights_normalized", "eval",
          "eval_pgd_steps", "eval_pgd_restarts", "eval_max_samples"}},
        {"gen",
         {"k_nn", "retained_variance", "sigma_pca", "phi", "zeta", "eta", "noise_var", "max_iters",
          "normalize_lambda", "classes", "count"}},
        {"telemetry",
         {"snapshot_every", "all_epochs", "aae_objective_loss", "co_pgd_floor", "co_fgsm_ceiling", "ro_drop",
          "ro_window"}},
    };
    return s;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void bad(const std::string& key, const std::string& want, const std::string& got) {
    throw ConfigError(key + ": expected " + want + ", got '" + got + "'");
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto* end = v.data() + v.size();
    const auto [p, ec] = std::from_chars(v.data(), end, out);
    if (v.empty() || ec != std::errc() || p != end) bad(key, "a non-negative integer", v);
    return out;
}

std::size_t to_size(const std::string& key, const std::string& v) { return std::size_t(to_u64(key, v)); }

double to_double(const std::string& key, const std::string& v) {
    char* end = nullptr;
    const double d = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(d)) bad(key, "a finite number", v);
    return d;
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    bad(key, "true or false", v);
}

std::vector<std::string> split(const std::string& v, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(trim(item));
    return out;
}

std::vector<std::size_t> to_size_list(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    if (v == "all" || v.empty()) return out;
    for (const auto& item : split(v, ',')) out.push_back(to_size(key, item));
    return out;
}

std::vector<training::LrStep> to_schedule(const std::string& key, const std::string& v) {
    std::vector<training::LrStep> out;
    for (const auto& item : split(v, ',')) {
        const auto parts = split(item, ':');
        if (parts.size() != 2) bad(key, "a list of epoch:lr pairs", v);
        out.push_back({to_size(key, parts[0]), to_double(key, parts[1])});
    }
    if (out.empty()) bad(key, "a list of epoch:lr pairs", v);
    return out;
}

std::string join(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

std::string b(bool v) { return v ? "true" : "false"; }
std::string f(double v) { return csv::format(v); }

// Flattened "section.key" -> trimmed value, rejecting anything outside the schema.
std::map<std::string, std::string> flatten(const pt::ptree& tree) {
    std::map<std::string, std::string> out;
    const auto& sch = schema();
    for (const auto& [name, node] : tree) {
        const bool is_section = !node.empty() || (sch.count(name) && name != "");
        if (!is_section) {
            if (!sch.at("").count(name)) throw ConfigError(name + ": unknown key");
            out[name] = trim(node.data());
            continue;
        }
        auto sec = sch.find(name);
        if (sec == sch.end() || name.empty()) throw ConfigError(name + ": unknown section");
        for (const auto& [key, leaf] : node) {
            const std::string path = name + "." + key;
            if (!sec->second.count(key)) throw ConfigError(path + ": unknown key");
            if (!leaf.empty()) throw ConfigError(path + ": nested keys are not supported");
            out[path] = trim(leaf.data());
        }
    }
    return out;
}

}  // namespace

void RunConfig::require(std::initializer_list<const char*> keys) const {
    for (const char* k : keys) {
        if (!has(k)) throw ConfigError(std::string(k) + ": required key is missing");
    }
}

void RunConfig::set_seed(std::uint64_t s) {
    seed = s;
    train.seed = s;
    gen.spec.seed = s;
}

RunConfig parse(const std::string& text, const std::filesystem::path& base_dir) {
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError("config: line " + std::to_string(e.line()) + ": " + e.message());
    }
    const auto kv = flatten(tree);
    RunConfig c;
    for (const auto& [k, v] : kv) c.given.insert(k);
    auto get = [&](const std::string& key) -> const std::string* {
        auto it = kv.find(key);
        return it == kv.end() ? nullptr : &it->second;
    };
    auto path_of = [&](const std::string& v) {
        std::filesystem::path p(v);
        if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
        return p.lexically_normal();
    };

    if (auto v = get("seed")) c.seed = to_u64("seed", *v);
    if (auto v = get("output_dir")) c.output_dir = *v;

    // data
    DataConfig& d = c.data;
    if (auto v = get("data.source")) {
        d.source = *v;
        if (d.source != "blobs" && d.source != "moons" && d.source != "tiny_shapes" && d.source != "idx") {
            bad("data.source", "blobs, moons, tiny_shapes or idx", *v);
        }
    }
    if (auto v = get("data.n")) d.n = to_size("data.n", *v);
    if (auto v = get("data.noise")) d.noise = to_double("data.noise", *v);
    if (auto v = get("data.classes")) d.classes = to_size("data.classes", *v);
    if (auto v = get("data.n_per_class")) d.n_per_class = to_size("data.n_per_class", *v);
    if (auto v = get("data.size")) d.size = to_size("data.size", *v);
    if (auto v = get("data.images")) d.images = path_of(*v);
    if (auto v = get("data.labels")) d.labels = path_of(*v);
    if (auto v = get("data.digits")) d.digits = to_size_list("data.digits", *v);
    if (auto v = get("data.per_class")) d.per_class = to_size("data.per_class", *v);
    if (auto v = get("data.test_fraction")) d.test_fraction = to_double("data.test_fraction", *v);
    if (!(d.test_fraction >= 0.0 && d.test_fraction < 1.0)) {
        bad("data.test_fraction", "a value in [0,1)", f(d.test_fraction));
    }
    if (d.source == "idx") {
        c.require({"data.images", "data.labels"});
    }

    if (auto v = get("model.arch")) {
        c.arch = *v;
        try {
            (void)ArchDescriptor::parse(c.arch);
        } catch (const std::exception& e) {
            throw ConfigError(std::string("model.arch: ") + e.what());
        }
    }

    // attack: kind and epsilon pick the defaults, the other keys override them
    AttackKind kind = AttackKind::pgd;
    double eps = 8.0 / 255.0;
    if (auto v = get("attack.kind")) {
        try {
            kind = attacks::parse_attack_kind(*v);
        } catch (const std::exception&) {
            bad("attack.kind", "an attack kind", *v);
        }
    }
    if (auto v = get("attack.epsilon")) eps = to_double("attack.epsilon", *v);
    AttackSpec& a = c.attack;
    a = AttackSpec::defaults(kind, eps);
    if (auto v = get("attack.alpha")) a.alpha = to_double("attack.alpha", *v);
    if (auto v = get("attack.steps")) a.steps = to_size("attack.steps", *v);
    if (auto v = get("attack.restarts")) a.restarts = to_size("attack.restarts", *v);
    if (auto v = get("attack.target")) a.target = to_size("attack.target", *v);
    if (auto v = get("attack.he_lambda")) a.he_lambda = to_double("attack.he_lambda", *v);
    if (auto v = get("attack.n_fgsm_k")) a.n_fgsm_k = to_double("attack.n_fgsm_k", *v);
    if (auto v = get("attack.clip_input")) a.clip_input = to_bool("attack.clip_input", *v);
    if (auto v = get("attack.random_start")) a.random_start = to_bool("attack.random_start", *v);
    try {
        a.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }

    // train
    training::TrainSpec& t = c.train;
    if (auto v = get("train.method")) {
        try {
            t.method = training::parse_method(*v);
        } catch (const std::exception&) {
            bad("train.method", "a training method", *v);
        }
    }
    t.attack = a;
    if (auto v = get("train.epochs")) t.epochs = to_size("train.epochs", *v);
    if (auto v = get("train.batch_size")) t.batch_size = to_size("train.batch_size", *v);
    if (auto v = get("train.lr_schedule")) t.lr_schedule = to_schedule("train.lr_schedule", *v);
    if (auto v = get("train.momentum")) t.momentum = to_double("train.momentum", *v);
    if (auto v = get("train.weight_decay")) t.weight_decay = to_double("train.weight_decay", *v);
    if (auto v = get("train.beta")) t.beta = to_double("train.beta", *v);
    if (auto v = get("train.gamma")) t.gamma = to_double("train.gamma", *v);
    if (auto v = get("train.der_start_epoch")) t.der_start_epoch = to_size("train.der_start_epoch", *v);
    if (auto v = get("train.trades_beta")) t.trades_beta = to_double("train.trades_beta", *v);
    const bool any_weight = get("train.w_correct") || get("train.w_incorrect") || get("train.weights_normalized");
    if (any_weight || t.method == training::Method::weighted_ce) {
        training::Weights w;
        if (auto v = get("train.w_correct")) w.w_correct = to_double("train.w_correct", *v);
        if (auto v = get("train.w_incorrect")) w.w_incorrect = to_double("train.w_incorrect", *v);
        if (auto v = get("train.weights_normalized")) w.normalized = to_bool("train.weights_normalized", *v);
        t.weights = w;
    }
    if (auto v = get("train.eval")) t.eval.enabled = to_bool("train.eval", *v);
    if (auto v = get("train.eval_pgd_steps")) t.eval.pgd_steps = to_size("train.eval_pgd_steps", *v);
    if (auto v = get("train.eval_pgd_restarts")) t.eval.pgd_restarts = to_size("train.eval_pgd_restarts", *v);
    if (auto v = get("train.eval_max_samples")) t.eval.max_samples = to_size("train.eval_max_samples", *v);
    if (c.has("train.method")) {
        try {
            t.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }

    // gen
    generation::GenSpec& g = c.gen.spec;
    if (auto v = get("gen.k_nn")) g.k_nn = to_size("gen.k_nn", *v);
    if (auto v = get("gen.retained_variance")) g.retained_variance = to_double("gen.retained_variance", *v);
    if (auto v = get("gen.sigma_pca")) g.sigma_pca = to_double("gen.sigma_pca", *v);
    if (auto v = get("gen.phi")) g.phi = to_double("gen.phi", *v);
    if (auto v = get("gen.zeta")) g.zeta = to_double("gen.zeta", *v);
    if (auto v = get("gen.eta")) g.eta = to_double("gen.eta", *v);
    if (auto v = get("gen.noise_var")) g.noise_var = to_double("gen.noise_var", *v);
    if (auto v = get("gen.max_iters")) g.max_iters = to_size("gen.max_iters", *v);
    if (auto v = get("gen.normalize_lambda")) g.normalize_lambda = to_bool("gen.normalize_lambda", *v);
    if (auto v = get("gen.classes")) c.gen.classes = to_size_list("gen.classes", *v);
    if (auto v = get("gen.count")) c.gen.count = to_size("gen.count", *v);
    try {
        g.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }

    // telemetry
    telemetry::Options& o = c.telemetry;
    if (auto v = get("telemetry.snapshot_every")) o.snapshot_every = to_size("telemetry.snapshot_every", *v);
    if (auto v = get("telemetry.all_epochs")) o.all_epochs = to_bool("telemetry.all_epochs", *v);
    if (auto v = get("telemetry.aae_objective_loss")) {
        o.aae_objective_loss = to_bool("telemetry.aae_objective_loss", *v);
    }
    if (auto v = get("telemetry.co_pgd_floor")) o.thresholds.co_pgd_floor = to_double("telemetry.co_pgd_floor", *v);
    if (auto v = get("telemetry.co_fgsm_ceiling")) {
        o.thresholds.co_fgsm_ceiling = to_double("telemetry.co_fgsm_ceiling", *v);
    }
    if (auto v = get("telemetry.ro_drop")) o.thresholds.ro_drop = to_double("telemetry.ro_drop", *v);
    if (auto v = get("telemetry.ro_window")) o.thresholds.ro_window = to_size("telemetry.ro_window", *v);

    c.set_seed(c.seed);
    return c;
}

RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.parent_path());
}

std::string echo(const RunConfig& c) {
    std::ostringstream o;
    o << "seed = " << c.seed << "\n";
    o << "output_dir = " << c.output_dir.string() << "\n";

    const DataConfig& d = c.data;
    o << "\n[data]\n";
    if (!d.source.empty()) o << "source = " << d.source << "\n";
    if (d.source == "blobs" || d.source == "moons") o << "n = " << d.n << "\nnoise = " << f(d.noise) << "\n";
    if (d.source == "blobs") o << "classes = " << d.classes << "\n";
    if (d.source == "tiny_shapes") {
        o << "n_per_class = " << d.n_per_class << "\nsize = " << d.size << "\nclasses = " << d.classes << "\n";
    }
    if (d.source == "idx") {
        o << "images = " << std::filesystem::absolute(d.images).lexically_normal().string() << "\n";
        o << "labels = " << std::filesystem::absolute(d.labels).lexically_normal().string() << "\n";
        if (!d.digits.empty()) o << "digits = " << join(d.digits) << "\n";
        if (d.per_class) o << "per_class = " << *d.per_class << "\n";
    }
    o << "test_fraction = " << f(d.test_fraction) << "\n";

    o << "\n[model]\n";
    if (!c.arch.empty()) o << "arch = " << c.arch << "\n";

    const AttackSpec& a = c.attack;
    o << "\n[attack]\nkind = " << attacks::to_string(a.kind) << "\nepsilon = " << f(a.epsilon)
      << "\nalpha = " << f(a.alpha) << "\nsteps = " << a.steps << "\nrestarts = " << a.restarts << "\n";
    if (a.target) o << "target = " << *a.target << "\n";
    o << "he_lambda = " << f(a.he_lambda) << "\nn_fgsm_k = " << f(a.n_fgsm_k) << "\nclip_input = " << b(a.clip_input)
      << "\nrandom_start = " << b(a.random_start) << "\n";

    const training::TrainSpec& t = c.train;
    o << "\n[train]\n";
    if (c.has("train.method")) o << "method = " << training::to_string(t.method) << "\n";
    o << "epochs = " << t.epochs << "\nbatch_size = " << t.batch_size << "\nlr_schedule = ";
    for (std::size_t i = 0; i < t.lr_schedule.size(); ++i) {
        o << (i ? "," : "") << t.lr_schedule[i].epoch << ":" << f(t.lr_schedule[i].lr);
    }
    o << "\nmomentum = " << f(t.momentum) << "\nweight_decay = " << f(t.weight_decay) << "\nbeta = " << f(t.beta)
      << "\ngamma = " << f(t.gamma) << "\n";
    if (t.der_start_epoch) o << "der_start_epoch = " << *t.der_start_epoch << "\n";
    o << "trades_beta = " << f(t.trades_beta) << "\n";
    if (t.weights) {
        o << "w_correct = " << f(t.weights->w_correct) << "\nw_incorrect = " << f(t.weights->w_incorrect)
          << "\nweights_normalized = " << b(t.weights->normalized) << "\n";
    }
    o << "eval = " << b(t.eval.enabled) << "\neval_pgd_steps = " << t.eval.pgd_steps
      << "\neval_pgd_restarts = " << t.eval.pgd_restarts << "\neval_max_samples = " << t.eval.max_samples << "\n";

    const generation::GenSpec& g = c.gen.spec;
    o << "\n[gen]\nk_nn = " << g.k_nn << "\nretained_variance = " << f(g.retained_variance)
      << "\nsigma_pca = " << f(g.sigma_pca) << "\nphi = " << f(g.phi) << "\nzeta = " << f(g.zeta)
      << "\neta = " << f(g.eta) << "\nnoise_var = " << f(g.noise_var) << "\nmax_iters = " << g.max_iters
      << "\nnormalize_lambda = " << b(g.normalize_lambda)
      << "\nclasses = " << (c.gen.classes.empty() ? std::string("all") : join(c.gen.classes))
      << "\ncount = " << c.gen.count << "\n";

    const telemetry::Options& m = c.telemetry;
    o << "\n[telemetry]\nsnapshot_every = " << m.snapshot_every << "\nall_epochs = " << b(m.all_epochs)
      << "\naae_objective_loss = " << b(m.aae_objective_loss) << "\nco_pgd_floor = " << f(m.thresholds.co_pgd_floor)
      << "\nco_fgsm_ceiling = " << f(m.thresholds.co_fgsm_ceiling) << "\nro_drop = " << f(m.thresholds.ro_drop)
      << "\nro_window = " << m.thresholds.ro_window << "\n";
    return o.str();
}

Splits load_data(const RunConfig& cfg) {
    const DataConfig& d = cfg.data;
    const std::uint64_t data_seed = derive_seed(cfg.seed, "data");
    auto all = [&]() -> Dataset {
        if (d.source == "blobs") return make_blobs(d.n, d.noise, data_seed, d.classes);
        if (d.source == "moons") return make_moons(d.n, d.noise, data_seed);
        if (d.source == "tiny_shapes") return make_tiny_shapes(d.n_per_class, d.size, data_seed, d.classes);
        if (d.source == "idx") {
            Dataset raw = load_idx(d.images, d.labels);
            if (d.digits.empty()) return raw;
            return filter_classes(raw, d.digits, d.per_class);
        }
        throw ConfigError("data.source: required key is missing");
    }();
    const auto n_test = static_cast<std::size_t>(std::llround(d.test_fraction * double(all.size())));
    if (n_test == 0) return {std::move(all), std::nullopt};
    auto [train, test] = train_test_split(all, n_test, derive_seed(cfg.seed, "split"));
    return {std::move(train), std::move(test)};
}

std::size_t thread_cap() {
    const char* v = std::getenv("ELAT_THREADS");
    if (!v || !*v) return 1;
    const std::size_t n = to_size("ELAT_THREADS", v);
    if (n == 0) throw ConfigError("ELAT_THREADS: must be >= 1");
    return n;
}

}  // namespace elat::config
