#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "fedgnp/federation.hpp"
#include "fedgnp/text.hpp"

namespace fedgnp {

inline constexpr std::uint64_t kTagData = 0x64617467;
inline constexpr std::uint64_t kTagPartition = 0x70617274;

/// Schema violations and malformed configs; mapped to exit code 1 by the CLI.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A sweep: one base configuration crossed with alpha, mask, gnp and seed axes.
struct ExperimentSpec {
    FedConfig base;
    std::vector<double> alphas;
    std::vector<PeftMask> masks;
    std::vector<int> gnp_flags;
    std::vector<std::uint64_t> seeds;
    std::string out_dir = "out";

    bool operator==(const ExperimentSpec& other) const = default;
};

namespace detail {

[[noreturn]] inline void config_fail(const std::string& path, const std::string& what) {
    throw ConfigError("config error at " + path + ": " + what);
}

inline double get_number(const nlohmann::json& j, const std::string& path) {
    if (!j.is_number()) {
        config_fail(path, "expected a number");
    }
    return j.get<double>();
}

inline std::size_t get_count(const nlohmann::json& j, const std::string& path) {
    if (!j.is_number_integer() || j.get<long long>() < 0) {
        config_fail(path, "expected a nonnegative integer");
    }
    return j.get<std::size_t>();
}

inline std::uint64_t get_seed(const nlohmann::json& j, const std::string& path) {
    if (!j.is_number_integer() || j.get<long long>() < 0) {
        config_fail(path, "expected a nonnegative integer seed");
    }
    return j.get<std::uint64_t>();
}

inline bool get_bool(const nlohmann::json& j, const std::string& path) {
    if (!j.is_boolean()) {
        config_fail(path, "expected a boolean");
    }
    return j.get<bool>();
}

inline std::string get_string(const nlohmann::json& j, const std::string& path) {
    if (!j.is_string()) {
        config_fail(path, "expected a string");
    }
    return j.get<std::string>();
}

inline ShiftSpec parse_shift(const nlohmann::json& j, const std::string& path, std::size_t d, std::size_t C) {
    if (!j.is_object()) {
        config_fail(path, "expected an object");
    }
    ShiftSpec shift;
    for (const auto& [key, value] : j.items()) {
        const std::string kpath = path + "/" + key;
        if (key == "name") {
            shift.name = get_string(value, kpath);
        } else if (key == "rotation_angle") {
            shift.rotation_angle = get_number(value, kpath);
        } else if (key == "mean_shift") {
            if (!value.is_array()) {
                config_fail(kpath, "expected an array");
            }
            shift.mean_shift = value.get<std::vector<double>>();
            if (shift.mean_shift.size() != d) {
                config_fail(kpath, "length must equal d = " + std::to_string(d));
            }
        } else if (key == "label_prior") {
            if (!value.is_array()) {
                config_fail(kpath, "expected an array");
            }
            shift.label_prior = value.get<std::vector<double>>();
            if (shift.label_prior.size() != C) {
                config_fail(kpath, "length must equal C = " + std::to_string(C));
            }
            double total = 0.0;
            for (double p : shift.label_prior) {
                if (p < 0.0) {
                    config_fail(kpath, "entries must be nonnegative");
                }
                total += p;
            }
            if (std::abs(total - 1.0) > 1e-9) {
                config_fail(kpath, "must sum to 1 within 1e-9");
            }
        } else if (key == "noise_scale") {
            shift.noise_scale = get_number(value, kpath);
            if (shift.noise_scale <= 0.0) {
                config_fail(kpath, "must be positive");
            }
        } else {
            config_fail(kpath, "unknown key");
        }
    }
    return shift;
}

inline nlohmann::json shift_to_json(const ShiftSpec& s) {
    nlohmann::json j;
    j["name"] = s.name;
    j["rotation_angle"] = s.rotation_angle;
    if (!s.mean_shift.empty()) {
        j["mean_shift"] = s.mean_shift;
    }
    if (!s.label_prior.empty()) {
        j["label_prior"] = s.label_prior;
    }
    j["noise_scale"] = s.noise_scale;
    return j;
}

} // namespace detail

/// Parses the experiment config. Unknown keys are rejected with a path-qualified
/// message; omitted optional keys take the documented defaults (tau = 20,
/// indicator_period = 10, gamma_max = 1.0, ...).
inline ExperimentSpec parse_config(const nlohmann::json& j) {
    using detail::config_fail;
    if (!j.is_object()) {
        config_fail("/", "top-level config must be an object");
    }
    static const std::set<std::string> known = {
        "K",     "T",        "E",           "eta",       "c",          "alpha",          "alphas",
        "tau",   "gamma_max", "indicator_period", "mask", "masks",     "gnp",            "gnp_flags",
        "noise_enabled", "projection_scope", "steps_per_epoch", "d",   "h",              "C",
        "n_train", "n_test", "shifts",      "seed",      "seeds",      "out_dir"};
    for (const auto& [key, value] : j.items()) {
        if (known.count(key) == 0) {
            config_fail("/" + key, "unknown key");
        }
    }
    for (const auto& [a, b] : std::vector<std::pair<std::string, std::string>>{
             {"alpha", "alphas"}, {"mask", "masks"}, {"gnp", "gnp_flags"}, {"seed", "seeds"}}) {
        if (j.contains(a) && j.contains(b)) {
            config_fail("/" + a, "give either '" + a + "' or '" + b + "', not both");
        }
    }
    for (const auto& req : {"K", "T", "E", "eta", "c"}) {
        if (!j.contains(req)) {
            config_fail("/" + std::string(req), "required key missing");
        }
    }
    if (!j.contains("alpha") && !j.contains("alphas")) {
        config_fail("/alpha", "required key missing (alpha or alphas)");
    }
    if (!j.contains("seed") && !j.contains("seeds")) {
        config_fail("/seed", "required key missing (seed or seeds)");
    }

    ExperimentSpec spec;
    FedConfig& cfg = spec.base;
    cfg.clients = detail::get_count(j.at("K"), "/K");
    cfg.rounds = detail::get_count(j.at("T"), "/T");
    cfg.local_epochs = detail::get_count(j.at("E"), "/E");
    cfg.eta = detail::get_number(j.at("eta"), "/eta");
    cfg.sampling_rate = detail::get_number(j.at("c"), "/c");
    if (cfg.clients < 1) {
        config_fail("/K", "need at least one client");
    }
    if (cfg.rounds < 1) {
        config_fail("/T", "need at least one round");
    }
    if (cfg.local_epochs < 1) {
        config_fail("/E", "need at least one local epoch");
    }
    if (!(cfg.eta > 0.0)) {
        config_fail("/eta", "learning rate must be positive");
    }
    if (!(cfg.sampling_rate > 0.0) || cfg.sampling_rate > 1.0) {
        config_fail("/c", "sampling rate must be in (0,1]");
    }

    if (j.contains("tau")) {
        cfg.tau = detail::get_number(j.at("tau"), "/tau");
        if (cfg.tau < 0.0) {
            config_fail("/tau", "must be nonnegative");
        }
    }
    if (j.contains("gamma_max")) {
        cfg.gamma_max = detail::get_number(j.at("gamma_max"), "/gamma_max");
        if (cfg.gamma_max < 0.0) {
            config_fail("/gamma_max", "must be nonnegative");
        }
    }
    if (j.contains("indicator_period")) {
        cfg.indicator_period = detail::get_count(j.at("indicator_period"), "/indicator_period");
        if (cfg.indicator_period < 1) {
            config_fail("/indicator_period", "must be positive");
        }
    }
    if (j.contains("noise_enabled")) {
        cfg.noise_enabled = detail::get_bool(j.at("noise_enabled"), "/noise_enabled");
    }
    if (j.contains("projection_scope")) {
        try {
            cfg.projection_scope = parse_projection_scope(detail::get_string(j.at("projection_scope"), "/projection_scope"));
        } catch (const std::invalid_argument& e) {
            config_fail("/projection_scope", e.what());
        }
    }
    if (j.contains("steps_per_epoch")) {
        cfg.steps_per_epoch = detail::get_count(j.at("steps_per_epoch"), "/steps_per_epoch");
        if (cfg.steps_per_epoch < 1) {
            config_fail("/steps_per_epoch", "must be positive");
        }
    }
    if (j.contains("d")) {
        cfg.feature_dim = detail::get_count(j.at("d"), "/d");
    }
    if (j.contains("h")) {
        cfg.hidden_dim = detail::get_count(j.at("h"), "/h");
    }
    if (j.contains("C")) {
        cfg.num_classes = detail::get_count(j.at("C"), "/C");
    }
    if (cfg.feature_dim < 2) {
        config_fail("/d", "need at least two feature dimensions");
    }
    if (cfg.hidden_dim < 1) {
        config_fail("/h", "need at least one hidden unit");
    }
    if (cfg.num_classes < 2) {
        config_fail("/C", "need at least two classes");
    }
    if (j.contains("n_train")) {
        cfg.n_train = detail::get_count(j.at("n_train"), "/n_train");
    }
    if (j.contains("n_test")) {
        cfg.n_test = detail::get_count(j.at("n_test"), "/n_test");
    }
    if (cfg.n_train < cfg.num_classes) {
        config_fail("/n_train", "must be at least the class count");
    }
    if (cfg.n_train < cfg.clients) {
        config_fail("/n_train", "must be at least the client count");
    }
    if (cfg.n_test < 1) {
        config_fail("/n_test", "must be positive");
    }

    if (j.contains("shifts")) {
        const auto& shifts = j.at("shifts");
        if (!shifts.is_array() || shifts.size() != 3) {
            config_fail("/shifts", "expected an array of exactly 3 shift objects");
        }
        for (std::size_t i = 0; i < shifts.size(); ++i) {
            cfg.shifts.push_back(
                detail::parse_shift(shifts[i], "/shifts/" + std::to_string(i), cfg.feature_dim, cfg.num_classes));
        }
    } else {
        cfg.shifts = default_benchmark_shifts(cfg.feature_dim, cfg.num_classes);
    }

    if (j.contains("alpha")) {
        spec.alphas = {detail::get_number(j.at("alpha"), "/alpha")};
    } else {
        if (!j.at("alphas").is_array() || j.at("alphas").empty()) {
            config_fail("/alphas", "expected a nonempty array");
        }
        for (std::size_t i = 0; i < j.at("alphas").size(); ++i) {
            spec.alphas.push_back(detail::get_number(j.at("alphas")[i], "/alphas/" + std::to_string(i)));
        }
    }
    for (double a : spec.alphas) {
        if (!(a > 0.0)) {
            config_fail("/alphas", "alpha values must be positive");
        }
    }

    auto parse_mask_at = [](const nlohmann::json& value, const std::string& path) {
        try {
            return PeftMask::parse(detail::get_string(value, path));
        } catch (const std::invalid_argument& e) {
            detail::config_fail(path, e.what());
        }
    };
    if (j.contains("mask")) {
        spec.masks = {parse_mask_at(j.at("mask"), "/mask")};
    } else if (j.contains("masks")) {
        if (!j.at("masks").is_array() || j.at("masks").empty()) {
            config_fail("/masks", "expected a nonempty array");
        }
        for (std::size_t i = 0; i < j.at("masks").size(); ++i) {
            spec.masks.push_back(parse_mask_at(j.at("masks")[i], "/masks/" + std::to_string(i)));
        }
    } else {
        spec.masks = {PeftMask::full()};
    }
    for (const PeftMask& m : spec.masks) {
        if (m.mode == PeftMode::LowRank && m.rank > std::min(cfg.hidden_dim, cfg.feature_dim)) {
            config_fail("/masks", "low-rank factor rank exceeds min(h, d)");
        }
    }

    if (j.contains("gnp")) {
        spec.gnp_flags = {detail::get_bool(j.at("gnp"), "/gnp") ? 1 : 0};
    } else if (j.contains("gnp_flags")) {
        if (!j.at("gnp_flags").is_array() || j.at("gnp_flags").empty()) {
            config_fail("/gnp_flags", "expected a nonempty array");
        }
        for (std::size_t i = 0; i < j.at("gnp_flags").size(); ++i) {
            spec.gnp_flags.push_back(
                detail::get_bool(j.at("gnp_flags")[i], "/gnp_flags/" + std::to_string(i)) ? 1 : 0);
        }
    } else {
        spec.gnp_flags = {0};
    }

    if (j.contains("seed")) {
        spec.seeds = {detail::get_seed(j.at("seed"), "/seed")};
    } else {
        if (!j.at("seeds").is_array() || j.at("seeds").empty()) {
            config_fail("/seeds", "expected a nonempty array");
        }
        for (std::size_t i = 0; i < j.at("seeds").size(); ++i) {
            spec.seeds.push_back(detail::get_seed(j.at("seeds")[i], "/seeds/" + std::to_string(i)));
        }
    }

    if (j.contains("out_dir")) {
        spec.out_dir = detail::get_string(j.at("out_dir"), "/out_dir");
    }
    return spec;
}

inline ExperimentSpec load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config file " + path);
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("malformed JSON in " + path + ": " + e.what());
    }
    return parse_config(j);
}

inline nlohmann::json to_json(const ExperimentSpec& spec) {
    const FedConfig& cfg = spec.base;
    nlohmann::json j;
    j["K"] = cfg.clients;
    j["T"] = cfg.rounds;
    j["E"] = cfg.local_epochs;
    j["eta"] = cfg.eta;
    j["c"] = cfg.sampling_rate;
    j["tau"] = cfg.tau;
    j["gamma_max"] = cfg.gamma_max;
    j["indicator_period"] = cfg.indicator_period;
    j["noise_enabled"] = cfg.noise_enabled;
    j["projection_scope"] = to_string(cfg.projection_scope);
    j["steps_per_epoch"] = cfg.steps_per_epoch;
    j["d"] = cfg.feature_dim;
    j["h"] = cfg.hidden_dim;
    j["C"] = cfg.num_classes;
    j["n_train"] = cfg.n_train;
    j["n_test"] = cfg.n_test;
    j["shifts"] = nlohmann::json::array();
    for (const ShiftSpec& s : cfg.shifts) {
        j["shifts"].push_back(detail::shift_to_json(s));
    }
    j["alphas"] = spec.alphas;
    j["masks"] = nlohmann::json::array();
    for (const PeftMask& m : spec.masks) {
        j["masks"].push_back(m.to_string());
    }
    j["gnp_flags"] = nlohmann::json::array();
    for (int g : spec.gnp_flags) {
        j["gnp_flags"].push_back(g != 0);
    }
    j["seeds"] = spec.seeds;
    j["out_dir"] = spec.out_dir;
    return j;
}

inline void save_config(const ExperimentSpec& spec, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("save_config: cannot open " + path);
    }
    out << to_json(spec).dump(2) << '\n';
}

/// One row of the metrics table; indicator columns are NaN between snapshots.
struct MetricsRow {
    double alpha = 0.0;
    std::string mask;
    int gnp = 0;
    std::uint64_t seed = 0;
    std::size_t round = 0;
    double id_acc = 0.0;
    double ood1_acc = 0.0;
    double ood2_acc = 0.0;
    double ood3_acc = 0.0;
    double loss = 0.0;
    double sve = 0.0;
    double lsvr = 0.0;
    double gda = 0.0;
    double gamma = 0.0;
    int clamped = 0;
    double robust_norm = 0.0;

    double mean_ood() const { return (ood1_acc + ood2_acc + ood3_acc) / 3.0; }
};

inline constexpr const char* kCsvHeader =
    "alpha,mask,gnp,seed,round,id_acc,ood1_acc,ood2_acc,ood3_acc,loss,sve,lsvr,gda,gamma,clamped,robust_norm";

struct MetricsTable {
    std::vector<MetricsRow> rows;

    void sort() {
        std::stable_sort(rows.begin(), rows.end(), [](const MetricsRow& a, const MetricsRow& b) {
            if (a.alpha != b.alpha) {
                return a.alpha < b.alpha;
            }
            if (a.mask != b.mask) {
                return a.mask < b.mask;
            }
            if (a.gnp != b.gnp) {
                return a.gnp < b.gnp;
            }
            if (a.seed != b.seed) {
                return a.seed < b.seed;
            }
            return a.round < b.round;
        });
    }
};

inline std::string format_row(const MetricsRow& r) {
    std::string out;
    out += format_double(r.alpha);
    out += ',';
    out += r.mask;
    out += ',';
    out += std::to_string(r.gnp);
    out += ',';
    out += std::to_string(r.seed);
    out += ',';
    out += std::to_string(r.round);
    for (double v : {r.id_acc, r.ood1_acc, r.ood2_acc, r.ood3_acc, r.loss, r.sve, r.lsvr, r.gda, r.gamma}) {
        out += ',';
        out += format_double(v);
    }
    out += ',';
    out += std::to_string(r.clamped);
    out += ',';
    out += format_double(r.robust_norm);
    return out;
}

inline void write_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("write_csv: cannot open " + path);
    }
    out << kCsvHeader << '\n';
    for (const MetricsRow& r : rows) {
        out << format_row(r) << '\n';
    }
    if (!out) {
        throw std::runtime_error("write_csv: write failed for " + path);
    }
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string current;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(current);
            current.clear();
        } else {
            current += ch;
        }
    }
    fields.push_back(current);
    return fields;
}

inline std::vector<MetricsRow> parse_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("parse_csv: cannot open " + path);
    }
    std::string line;
    if (!std::getline(in, line) || line != kCsvHeader) {
        throw std::runtime_error("parse_csv: bad header in " + path);
    }
    std::vector<MetricsRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const auto f = split_csv_line(line);
        if (f.size() != 16) {
            throw std::runtime_error("parse_csv: wrong field count in " + path);
        }
        MetricsRow r;
        r.alpha = parse_double(f[0]);
        r.mask = f[1];
        r.gnp = static_cast<int>(parse_i64(f[2]));
        r.seed = parse_u64(f[3]);
        r.round = static_cast<std::size_t>(parse_u64(f[4]));
        r.id_acc = parse_double(f[5]);
        r.ood1_acc = parse_double(f[6]);
        r.ood2_acc = parse_double(f[7]);
        r.ood3_acc = parse_double(f[8]);
        r.loss = parse_double(f[9]);
        r.sve = parse_double(f[10]);
        r.lsvr = parse_double(f[11]);
        r.gda = parse_double(f[12]);
        r.gamma = parse_double(f[13]);
        r.clamped = static_cast<int>(parse_i64(f[14]));
        r.robust_norm = parse_double(f[15]);
        rows.push_back(std::move(r));
    }
    return rows;
}

/// Builds the FedConfig for one sweep cell.
inline FedConfig cell_config(const ExperimentSpec& spec, double alpha, const PeftMask& mask, bool gnp,
                             std::uint64_t seed) {
    FedConfig cfg = spec.base;
    cfg.alpha = alpha;
    cfg.mask = mask;
    cfg.gnp_enabled = gnp;
    cfg.seed = seed;
    return cfg;
}

inline std::string sanitize_mask_name(const std::string& mask) {
    std::string out = mask;
    std::replace(out.begin(), out.end(), ':', '-');
    return out;
}

inline std::string cell_filename(double alpha, const PeftMask& mask, bool gnp, std::uint64_t seed) {
    return "run_a" + format_double(alpha) + "_" + sanitize_mask_name(mask.to_string()) + "_g" + (gnp ? "1" : "0") +
           "_s" + std::to_string(seed) + ".csv";
}

/// Runs a single cell end to end: generate data (seed-derived, alpha-independent),
/// partition, run, convert the log to metric rows.
inline std::vector<MetricsRow> run_cell(const FedConfig& cfg) {
    if (cfg.shifts.size() != 3) {
        throw std::invalid_argument("run_cell: the metrics schema expects exactly 3 OOD shifts");
    }
    const GeneratedData data =
        generate(mix_seed(cfg.seed, kTagData), cfg.n_train, cfg.n_test, cfg.feature_dim, cfg.num_classes, cfg.shifts);
    const Partition part =
        dirichlet_partition(data.id_train, cfg.clients, cfg.alpha, mix_seed(cfg.seed, kTagPartition));
    const RunLog log = run(cfg, data, part);

    std::vector<MetricsRow> rows;
    rows.reserve(log.rounds.size());
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (const RoundRecord& rec : log.rounds) {
        MetricsRow r;
        r.alpha = cfg.alpha;
        r.mask = cfg.mask.to_string();
        r.gnp = cfg.gnp_enabled ? 1 : 0;
        r.seed = cfg.seed;
        r.round = rec.round;
        r.id_acc = rec.id_accuracy;
        r.ood1_acc = rec.ood_accuracies[0];
        r.ood2_acc = rec.ood_accuracies[1];
        r.ood3_acc = rec.ood_accuracies[2];
        r.loss = rec.train_loss;
        r.sve = rec.snapshot ? rec.snapshot->sve : nan;
        r.lsvr = rec.snapshot ? rec.snapshot->lsvr : nan;
        r.gda = rec.snapshot ? rec.snapshot->gda : nan;
        r.gamma = rec.gamma;
        r.clamped = rec.clamped ? 1 : 0;
        r.robust_norm = rec.robust_norm;
        rows.push_back(std::move(r));
    }
    return rows;
}

struct SweepError {
    std::string cell;
    std::string message;
};

struct SweepResult {
    MetricsTable table;
    std::vector<SweepError> errors;
};

/// Runs every cell of the cross-product. Cells whose output file already exists are
/// parsed back instead of recomputed, which makes interrupted sweeps resumable. A
/// failing cell is recorded and the sweep continues.
inline SweepResult run_sweep(const ExperimentSpec& spec) {
    namespace fs = std::filesystem;
    fs::create_directories(spec.out_dir);
    SweepResult result;
    nlohmann::json cells = nlohmann::json::array();
    for (double alpha : spec.alphas) {
        for (const PeftMask& mask : spec.masks) {
            for (int gnp : spec.gnp_flags) {
                for (std::uint64_t seed : spec.seeds) {
                    const std::string name = cell_filename(alpha, mask, gnp != 0, seed);
                    const fs::path path = fs::path(spec.out_dir) / name;
                    nlohmann::json cell;
                    cell["alpha"] = alpha;
                    cell["mask"] = mask.to_string();
                    cell["gnp"] = gnp != 0;
                    cell["seed"] = seed;
                    cell["file"] = name;
                    std::vector<MetricsRow> rows;
                    try {
                        if (fs::exists(path)) {
                            rows = parse_csv(path.string());
                            cell["status"] = "cached";
                        } else {
                            rows = run_cell(cell_config(spec, alpha, mask, gnp != 0, seed));
                            write_csv(path.string(), rows);
                            cell["status"] = "ok";
                        }
                        if (!rows.empty()) {
                            const MetricsRow& last = rows.back();
                            cell["final_round"] = last.round;
                            cell["final_id_acc"] = last.id_acc;
                            cell["final_ood_acc"] = {last.ood1_acc, last.ood2_acc, last.ood3_acc};
                        }
                        result.table.rows.insert(result.table.rows.end(), rows.begin(), rows.end());
                    } catch (const std::exception& e) {
                        cell["status"] = "error";
                        cell["error"] = e.what();
                        result.errors.push_back({name, e.what()});
                    }
                    cells.push_back(std::move(cell));
                }
            }
        }
    }
    result.table.sort();
    write_csv((fs::path(spec.out_dir) / "summary.csv").string(), result.table.rows);

    nlohmann::json summary;
    summary["spec"] = to_json(spec);
    summary["cells"] = std::move(cells);
    std::ofstream out(fs::path(spec.out_dir) / "summary.json");
    if (!out) {
        throw std::runtime_error("run_sweep: cannot write summary.json");
    }
    out << summary.dump(2) << '\n';
    return result;
}

struct DirectionalCheck {
    std::string name;
    bool evaluable = false;
    bool pass = false;
    std::string detail;
};

struct ReportResult {
    bool complete = true;
    std::vector<DirectionalCheck> checks;
};

namespace detail {

struct CellSeries {
    std::vector<MetricsRow> rows; // sorted by round
};

using CellMap = std::map<std::tuple<double, std::string, int, std::uint64_t>, CellSeries>;

inline CellMap group_cells(const MetricsTable& table) {
    CellMap cells;
    for (const MetricsRow& r : table.rows) {
        cells[{r.alpha, r.mask, r.gnp, r.seed}].rows.push_back(r);
    }
    for (auto& [key, series] : cells) {
        std::stable_sort(series.rows.begin(), series.rows.end(),
                         [](const MetricsRow& a, const MetricsRow& b) { return a.round < b.round; });
    }
    return cells;
}

inline double mean(const std::vector<double>& v) {
    double sum = 0.0;
    for (double x : v) {
        sum += x;
    }
    return v.empty() ? std::numeric_limits<double>::quiet_NaN() : sum / static_cast<double>(v.size());
}

/// Final-round id/ood means per seed for a given (alpha, mask, gnp).
struct FinalStats {
    std::vector<std::uint64_t> seeds;
    std::vector<double> id_acc;
    std::vector<double> ood_acc; // mean over the three shifts
};

inline FinalStats final_stats(const CellMap& cells, double alpha, const std::string& mask, int gnp) {
    FinalStats stats;
    for (const auto& [key, series] : cells) {
        if (std::get<0>(key) == alpha && std::get<1>(key) == mask && std::get<2>(key) == gnp &&
            !series.rows.empty()) {
            stats.seeds.push_back(std::get<3>(key));
            stats.id_acc.push_back(series.rows.back().id_acc);
            stats.ood_acc.push_back(series.rows.back().mean_ood());
        }
    }
    return stats;
}

/// Mean of an indicator over the last `count` snapshot rows, pooled across seeds.
inline double tail_indicator_mean(const CellMap& cells, double alpha, const std::string& mask, int gnp,
                                  double MetricsRow::*field, std::size_t count) {
    std::vector<double> values;
    for (const auto& [key, series] : cells) {
        if (std::get<0>(key) != alpha || std::get<1>(key) != mask || std::get<2>(key) != gnp) {
            continue;
        }
        std::vector<double> snaps;
        for (const MetricsRow& r : series.rows) {
            if (!std::isnan(r.sve)) {
                snaps.push_back(r.*field);
            }
        }
        const std::size_t take = std::min(count, snaps.size());
        for (std::size_t i = snaps.size() - take; i < snaps.size(); ++i) {
            values.push_back(snaps[i]);
        }
    }
    return mean(values);
}

} // namespace detail

/// Directional trend checks over a metrics table: heterogeneity harming OOD more
/// than ID, the indicator drift between low and high alpha, and the GNP-vs-baseline
/// comparison at the most heterogeneous alpha. Each check names the cells it needs
/// and is skipped (not failed) when the table lacks them.
inline std::vector<DirectionalCheck> evaluate_directional(const MetricsTable& table, const std::string& mask) {
    const auto cells = detail::group_cells(table);
    std::vector<double> alphas;
    for (const auto& [key, series] : cells) {
        if (std::get<1>(key) == mask) {
            alphas.push_back(std::get<0>(key));
        }
    }
    std::sort(alphas.begin(), alphas.end());
    alphas.erase(std::unique(alphas.begin(), alphas.end()), alphas.end());

    std::vector<DirectionalCheck> checks;
    DirectionalCheck het{"heterogeneity_hurts_ood", false, false, ""};
    DirectionalCheck ind{"indicator_trend", false, false, ""};
    DirectionalCheck gnp{"gnp_improves_ood", false, false, ""};

    if (alphas.size() >= 2) {
        const double lo = alphas.front();
        const double hi = alphas.back();
        const auto base_lo = detail::final_stats(cells, lo, mask, 0);
        const auto base_hi = detail::final_stats(cells, hi, mask, 0);
        if (!base_lo.seeds.empty() && !base_hi.seeds.empty()) {
            het.evaluable = true;
            const double ood_gap = detail::mean(base_hi.ood_acc) - detail::mean(base_lo.ood_acc);
            const double id_gap = std::abs(detail::mean(base_hi.id_acc) - detail::mean(base_lo.id_acc));
            het.pass = ood_gap >= 0.03 && id_gap < 0.03;
            het.detail = "ood(alpha=" + format_double(hi) + ") - ood(alpha=" + format_double(lo) + ") = " +
                         format_double(ood_gap) + ", |id gap| = " + format_double(id_gap);

            const double sve_lo = detail::tail_indicator_mean(cells, lo, mask, 0, &MetricsRow::sve, 3);
            const double sve_hi = detail::tail_indicator_mean(cells, hi, mask, 0, &MetricsRow::sve, 3);
            const double lsvr_lo = detail::tail_indicator_mean(cells, lo, mask, 0, &MetricsRow::lsvr, 3);
            const double lsvr_hi = detail::tail_indicator_mean(cells, hi, mask, 0, &MetricsRow::lsvr, 3);
            if (!std::isnan(sve_lo) && !std::isnan(sve_hi)) {
                ind.evaluable = true;
                ind.pass = sve_lo < sve_hi && lsvr_lo > lsvr_hi;
                ind.detail = "sve " + format_double(sve_lo) + " vs " + format_double(sve_hi) + ", lsvr " +
                             format_double(lsvr_lo) + " vs " + format_double(lsvr_hi);
            }
        }
        const auto gnp_lo = detail::final_stats(cells, lo, mask, 1);
        if (!base_lo.seeds.empty() && gnp_lo.seeds == base_lo.seeds) {
            gnp.evaluable = true;
            std::size_t wins = 0;
            for (std::size_t i = 0; i < base_lo.seeds.size(); ++i) {
                if (gnp_lo.ood_acc[i] > base_lo.ood_acc[i]) {
                    ++wins;
                }
            }
            const double mean_gain = detail::mean(gnp_lo.ood_acc) - detail::mean(base_lo.ood_acc);
            const double id_shift = std::abs(detail::mean(gnp_lo.id_acc) - detail::mean(base_lo.id_acc));
            const std::size_t needed = (3 * base_lo.seeds.size() + 4) / 5; // 3 of 5, scaled
            gnp.pass = mean_gain >= 0.0 && wins >= needed && id_shift <= 0.01;
            gnp.detail = "mean ood gain = " + format_double(mean_gain) + ", wins = " + std::to_string(wins) + "/" +
                         std::to_string(base_lo.seeds.size()) + ", |id shift| = " + format_double(id_shift);
        }
    }
    checks.push_back(het);
    checks.push_back(ind);
    checks.push_back(gnp);
    return checks;
}

/// Emits the plot-ready summaries: a final-round accuracy grid per (alpha, mask,
/// gnp) with on-minus-off deltas, the indicator time series of every run, and a
/// text summary of the directional checks.
inline ReportResult report(const MetricsTable& table, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    ReportResult result;
    const auto cells = detail::group_cells(table);

    std::set<std::pair<double, std::string>> grid_keys;
    std::set<std::string> masks;
    for (const auto& [key, series] : cells) {
        grid_keys.insert({std::get<0>(key), std::get<1>(key)});
        masks.insert(std::get<1>(key));
    }

    {
        std::ofstream out(fs::path(out_dir) / "accuracy_grid.csv");
        if (!out) {
            throw std::runtime_error("report: cannot write accuracy_grid.csv");
        }
        out << "alpha,mask,id_acc_base,id_acc_gnp,id_acc_delta,ood_acc_base,ood_acc_gnp,ood_acc_delta\n";
        for (const auto& [alpha, mask] : grid_keys) {
            const auto base = detail::final_stats(cells, alpha, mask, 0);
            const auto gnp = detail::final_stats(cells, alpha, mask, 1);
            out << format_double(alpha) << ',' << mask;
            const bool has_base = !base.seeds.empty();
            const bool has_gnp = !gnp.seeds.empty();
            if (!has_base || !has_gnp) {
                result.complete = false;
            }
            auto emit = [&out](bool present, double value) {
                out << ',';
                if (present) {
                    out << format_double(value);
                }
            };
            emit(has_base, detail::mean(base.id_acc));
            emit(has_gnp, detail::mean(gnp.id_acc));
            emit(has_base && has_gnp, detail::mean(gnp.id_acc) - detail::mean(base.id_acc));
            emit(has_base, detail::mean(base.ood_acc));
            emit(has_gnp, detail::mean(gnp.ood_acc));
            emit(has_base && has_gnp, detail::mean(gnp.ood_acc) - detail::mean(base.ood_acc));
            out << '\n';
        }
    }

    {
        std::ofstream out(fs::path(out_dir) / "indicator_series.csv");
        if (!out) {
            throw std::runtime_error("report: cannot write indicator_series.csv");
        }
        out << "alpha,mask,gnp,seed,round,sve,lsvr,gda,gamma\n";
        for (const auto& [key, series] : cells) {
            for (const MetricsRow& r : series.rows) {
                if (std::isnan(r.sve)) {
                    continue;
                }
                out << format_double(r.alpha) << ',' << r.mask << ',' << r.gnp << ',' << r.seed << ',' << r.round
                    << ',' << format_double(r.sve) << ',' << format_double(r.lsvr) << ',' << format_double(r.gda)
                    << ',' << format_double(r.gamma) << '\n';
            }
        }
    }

    {
        std::ofstream out(fs::path(out_dir) / "directional_summary.txt");
        if (!out) {
            throw std::runtime_error("report: cannot write directional_summary.txt");
        }
        if (!result.complete) {
            out << "note: table is missing gnp on/off counterparts for some cells; partial report\n";
        }
        for (const std::string& mask : masks) {
            const auto checks = evaluate_directional(table, mask);
            for (const DirectionalCheck& check : checks) {
                out << "mask=" << mask << ' ' << check.name << ": ";
                if (!check.evaluable) {
                    out << "SKIPPED (missing cells)";
                } else {
                    out << (check.pass ? "PASS" : "FAIL") << " (" << check.detail << ")";
                }
                out << '\n';
                result.checks.push_back(check);
            }
        }
    }
    return result;
}

} // namespace fedgnp
