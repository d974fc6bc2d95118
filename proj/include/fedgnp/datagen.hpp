#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedgnp/log.hpp"
#include "fedgnp/matrix.hpp"
#include "fedgnp/rng.hpp"
#include "fedgnp/text.hpp"

namespace fedgnp {

// Stream tags for derived RNGs.
inline constexpr std::uint64_t kStreamDataset = 0x6461'7461;   // per-dataset draws
inline constexpr std::uint64_t kStreamPartition = 0x7061'7274; // dirichlet partitioning

/// Labeled feature vectors for one classification set.
struct Dataset {
    std::vector<std::vector<double>> features;
    std::vector<int> labels;
    std::size_t num_classes = 0;
    std::string name;

    std::size_t size() const { return features.size(); }
    std::size_t dim() const { return features.empty() ? 0 : features.front().size(); }

    void validate() const {
        if (features.size() != labels.size()) {
            throw std::invalid_argument("Dataset: features and labels differ in length");
        }
        for (std::size_t i = 0; i < features.size(); ++i) {
            if (features[i].size() != dim()) {
                throw std::invalid_argument("Dataset: inconsistent feature dimension");
            }
            for (double v : features[i]) {
                if (!std::isfinite(v)) {
                    throw std::invalid_argument("Dataset: non-finite feature value");
                }
            }
            if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
                throw std::invalid_argument("Dataset: label out of range");
            }
        }
    }
};

/// Controlled distribution shift applied to the shared class-cluster structure.
struct ShiftSpec {
    std::string name;
    double rotation_angle = 0.0;        // radians, applied to the class-mean geometry
    std::vector<double> mean_shift;     // length d, or empty for zero
    std::vector<double> label_prior;    // length C, or empty for uniform
    double noise_scale = 1.0;           // multiplier on within-class standard deviation

    bool operator==(const ShiftSpec& other) const = default;
};

struct GeneratedData {
    Dataset id_train;
    Dataset id_test;
    std::vector<Dataset> ood_tests;
};

/// Per-client shards of a parent dataset.
struct Partition {
    std::vector<std::vector<std::size_t>> client_indices;
    double alpha = 0.0;
    std::uint64_t seed = 0;

    std::size_t clients() const { return client_indices.size(); }
};

// Cluster geometry shared by every dataset: class c sits at generating angle
// 2*pi*c/C on two circular harmonics, the first in dims (0,1) and the second in
// dims (2,3) when the space has them. The two planes carry redundant class cues
// with different strengths, so a model may separate the classes from either one.
// Rotating the geometry shifts the generating angle, which turns the first
// harmonic by the angle and the second by twice the angle. Within-class noise is
// isotropic with sigma kClusterSigma.
inline constexpr double kClusterRadius = 2.2;  // first harmonic
inline constexpr double kClusterRadius2 = 1.4; // second harmonic
inline constexpr double kClusterSigma = 1.0;

inline std::vector<std::vector<double>> class_means(std::size_t d, std::size_t C, double rotation_angle = 0.0) {
    std::vector<std::vector<double>> means(C, std::vector<double>(d, 0.0));
    for (std::size_t c = 0; c < C; ++c) {
        const double angle = 2.0 * M_PI * static_cast<double>(c) / static_cast<double>(C) + rotation_angle;
        means[c][0] = kClusterRadius * std::cos(angle);
        means[c][1] = kClusterRadius * std::sin(angle);
        if (d >= 4) {
            means[c][2] = kClusterRadius2 * std::cos(2.0 * angle);
            means[c][3] = kClusterRadius2 * std::sin(2.0 * angle);
        }
    }
    return means;
}

namespace detail {

inline void validate_prior(const std::vector<double>& prior, std::size_t C, const char* what) {
    if (prior.size() != C) {
        throw std::invalid_argument(std::string(what) + ": prior length must equal class count");
    }
    double total = 0.0;
    for (double p : prior) {
        if (p < 0.0 || !std::isfinite(p)) {
            throw std::invalid_argument(std::string(what) + ": prior entries must be nonnegative");
        }
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw std::invalid_argument(std::string(what) + ": prior must sum to 1 within 1e-9");
    }
}

inline int draw_label(SeededRng& rng, const std::vector<double>& prior) {
    const double u = rng.uniform01();
    double acc = 0.0;
    for (std::size_t c = 0; c < prior.size(); ++c) {
        acc += prior[c];
        if (u < acc) {
            return static_cast<int>(c);
        }
    }
    return static_cast<int>(prior.size()) - 1;
}

inline Dataset sample_dataset(SeededRng& rng, std::size_t n, std::size_t d, std::size_t C, const ShiftSpec& shift,
                              std::string name) {
    if (shift.noise_scale <= 0.0) {
        throw std::invalid_argument("generate: noise_scale must be positive");
    }
    if (!shift.mean_shift.empty() && shift.mean_shift.size() != d) {
        throw std::invalid_argument("generate: mean_shift length must equal feature dimension");
    }
    std::vector<double> prior = shift.label_prior;
    if (prior.empty()) {
        prior.assign(C, 1.0 / static_cast<double>(C));
    }
    validate_prior(prior, C, "generate");

    const auto means = class_means(d, C, shift.rotation_angle);
    Dataset ds;
    ds.num_classes = C;
    ds.name = std::move(name);
    ds.features.reserve(n);
    ds.labels.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int label = draw_label(rng, prior);
        std::vector<double> x(d);
        for (std::size_t k = 0; k < d; ++k) {
            x[k] = means[static_cast<std::size_t>(label)][k] + shift.noise_scale * kClusterSigma * rng.normal();
            if (!shift.mean_shift.empty()) {
                x[k] += shift.mean_shift[k];
            }
        }
        ds.features.push_back(std::move(x));
        ds.labels.push_back(label);
    }
    return ds;
}

} // namespace detail

/// The identity shift: OOD set drawn from the ID distribution itself.
inline ShiftSpec identity_shift() {
    ShiftSpec s;
    s.name = "identity";
    return s;
}

/// Synthetic ID train/test plus one OOD test set per ShiftSpec. All sets share the
/// class-cluster structure; each OOD set perturbs the feature geometry while
/// keeping labels meaningful, so a Bayes-optimal ID classifier stays above chance.
inline GeneratedData generate(std::uint64_t seed, std::size_t n_train, std::size_t n_test, std::size_t d,
                              std::size_t C, const std::vector<ShiftSpec>& shifts) {
    if (C < 2) {
        throw std::invalid_argument("generate: need at least two classes");
    }
    if (d < 2) {
        throw std::invalid_argument("generate: need at least two feature dimensions");
    }
    if (n_train < C) {
        throw std::invalid_argument("generate: n_train must be at least the class count");
    }
    GeneratedData data;
    const ShiftSpec id = identity_shift();
    {
        SeededRng rng(seed, mix_seed(kStreamDataset, 0));
        data.id_train = detail::sample_dataset(rng, n_train, d, C, id, "id_train");
    }
    {
        SeededRng rng(seed, mix_seed(kStreamDataset, 1));
        data.id_test = detail::sample_dataset(rng, n_test, d, C, id, "id_test");
    }
    for (std::size_t i = 0; i < shifts.size(); ++i) {
        SeededRng rng(seed, mix_seed(kStreamDataset, 2 + i));
        std::string name = shifts[i].name.empty() ? ("ood_" + std::to_string(i + 1)) : shifts[i].name;
        data.ood_tests.push_back(detail::sample_dataset(rng, n_test, d, C, shifts[i], std::move(name)));
    }
    return data;
}

/// Label-skew partition: for each class, client shares are drawn from
/// Dirichlet(alpha * 1_K) and that class's samples are assigned multinomially.
/// Clients that end up empty steal one sample from the largest client.
inline Partition dirichlet_partition(const Dataset& ds, std::size_t K, double alpha, std::uint64_t seed) {
    if (K < 1) {
        throw std::invalid_argument("dirichlet_partition: need at least one client");
    }
    if (!(alpha > 0.0)) {
        throw std::invalid_argument("dirichlet_partition: alpha must be positive");
    }
    if (ds.size() < K) {
        throw std::invalid_argument("dirichlet_partition: fewer samples than clients");
    }
    SeededRng rng(seed, kStreamPartition);
    Partition part;
    part.alpha = alpha;
    part.seed = seed;
    part.client_indices.assign(K, {});

    for (std::size_t c = 0; c < ds.num_classes; ++c) {
        std::vector<double> shares(K);
        double total = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            shares[k] = rng.gamma(alpha);
            total += shares[k];
        }
        for (double& s : shares) {
            s = total > 0.0 ? s / total : 1.0 / static_cast<double>(K);
        }
        for (std::size_t i = 0; i < ds.size(); ++i) {
            if (ds.labels[i] != static_cast<int>(c)) {
                continue;
            }
            const double u = rng.uniform01();
            double acc = 0.0;
            std::size_t client = K - 1;
            for (std::size_t k = 0; k < K; ++k) {
                acc += shares[k];
                if (u < acc) {
                    client = k;
                    break;
                }
            }
            part.client_indices[client].push_back(i);
        }
    }

    // Empty-client repair: move one sample from the currently largest client.
    for (std::size_t k = 0; k < K; ++k) {
        if (!part.client_indices[k].empty()) {
            continue;
        }
        std::size_t largest = 0;
        for (std::size_t j = 1; j < K; ++j) {
            if (part.client_indices[j].size() > part.client_indices[largest].size()) {
                largest = j;
            }
        }
        if (part.client_indices[largest].size() <= 1) {
            throw std::runtime_error("dirichlet_partition: cannot repair empty client");
        }
        part.client_indices[k].push_back(part.client_indices[largest].back());
        part.client_indices[largest].pop_back();
        log::warn("dirichlet_partition: client " + std::to_string(k) + " was empty; moved one sample from client " +
                  std::to_string(largest));
    }
    return part;
}

/// Jensen-Shannon distance (natural log): sqrt of the symmetrized, bounded KL
/// divergence against the mixture m = (p+q)/2. Lies in [0, sqrt(ln 2)].
inline double js_distance(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) {
        throw std::invalid_argument("js_distance: distributions differ in length");
    }
    double sp = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] < 0.0 || q[i] < 0.0 || !std::isfinite(p[i]) || !std::isfinite(q[i])) {
            throw std::invalid_argument("js_distance: entries must be nonnegative and finite");
        }
        sp += p[i];
        sq += q[i];
    }
    if (std::abs(sp - 1.0) > 1e-9 || std::abs(sq - 1.0) > 1e-9) {
        throw std::invalid_argument("js_distance: distributions must sum to 1 within 1e-9");
    }
    double divergence = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        if (p[i] > 0.0) {
            divergence += 0.5 * p[i] * std::log(p[i] / m);
        }
        if (q[i] > 0.0) {
            divergence += 0.5 * q[i] * std::log(q[i] / m);
        }
    }
    return std::sqrt(std::max(divergence, 0.0));
}

/// Normalized label histogram of the samples selected by `indices`.
inline std::vector<double> label_histogram(const Dataset& ds, std::span<const std::size_t> indices) {
    std::vector<double> hist(ds.num_classes, 0.0);
    for (std::size_t idx : indices) {
        hist[static_cast<std::size_t>(ds.labels[idx])] += 1.0;
    }
    if (!indices.empty()) {
        for (double& h : hist) {
            h /= static_cast<double>(indices.size());
        }
    }
    return hist;
}

struct PairwiseJs {
    Matrix distances;      // K x K, symmetric, zero diagonal
    double mean_upper = 0; // mean over the strict upper triangle
    double max_upper = 0;  // max over the strict upper triangle
};

/// Pairwise Jensen-Shannon distances between client label histograms.
inline PairwiseJs pairwise_js(const Partition& part, const Dataset& ds) {
    const std::size_t K = part.clients();
    std::vector<std::vector<double>> hists(K);
    for (std::size_t k = 0; k < K; ++k) {
        hists[k] = label_histogram(ds, part.client_indices[k]);
    }
    PairwiseJs out;
    out.distances = Matrix(K, K);
    double sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < K; ++i) {
        for (std::size_t j = i + 1; j < K; ++j) {
            const double dist = js_distance(hists[i], hists[j]);
            out.distances(i, j) = dist;
            out.distances(j, i) = dist;
            sum += dist;
            out.max_upper = std::max(out.max_upper, dist);
            ++pairs;
        }
    }
    out.mean_upper = pairs > 0 ? sum / static_cast<double>(pairs) : 0.0;
    return out;
}

/// Flat text format: header line "d C n", then one line per sample
/// "label v1 v2 ... vd". Locale-independent, round-trip exact.
inline void save_dataset(const Dataset& ds, const std::string& path) {
    ds.validate();
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("save_dataset: cannot open " + path);
    }
    out << ds.dim() << ' ' << ds.num_classes << ' ' << ds.size() << '\n';
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out << ds.labels[i];
        for (double v : ds.features[i]) {
            out << ' ' << format_double(v);
        }
        out << '\n';
    }
    if (!out) {
        throw std::runtime_error("save_dataset: write failed for " + path);
    }
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("load_dataset: cannot open " + path);
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw std::runtime_error("load_dataset: missing header in " + path);
    }
    std::istringstream header(line);
    std::size_t d = 0, C = 0, n = 0;
    if (!(header >> d >> C >> n)) {
        throw std::runtime_error("load_dataset: malformed header in " + path);
    }
    Dataset ds;
    ds.num_classes = C;
    ds.name = path;
    ds.features.reserve(n);
    ds.labels.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::getline(in, line)) {
            throw std::runtime_error("load_dataset: truncated file " + path);
        }
        std::istringstream row(line);
        std::string tok;
        if (!(row >> tok)) {
            throw std::runtime_error("load_dataset: empty sample line in " + path);
        }
        ds.labels.push_back(static_cast<int>(parse_i64(tok)));
        std::vector<double> x;
        x.reserve(d);
        while (row >> tok) {
            x.push_back(parse_double(tok));
        }
        if (x.size() != d) {
            throw std::runtime_error("load_dataset: wrong feature count in " + path);
        }
        ds.features.push_back(std::move(x));
    }
    ds.validate();
    return ds;
}

inline void save_partition(const Partition& part, const std::string& path) {
    nlohmann::json j;
    j["alpha"] = part.alpha;
    j["seed"] = part.seed;
    j["clients"] = part.client_indices;
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("save_partition: cannot open " + path);
    }
    out << j.dump(2) << '\n';
}

inline Partition load_partition(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("load_partition: cannot open " + path);
    }
    nlohmann::json j = nlohmann::json::parse(in);
    Partition part;
    part.alpha = j.at("alpha").get<double>();
    part.seed = j.at("seed").get<std::uint64_t>();
    part.client_indices = j.at("clients").get<std::vector<std::vector<std::size_t>>>();
    return part;
}

/// The three-shift benchmark used by the default experiment grid: a rotation of
/// the class geometry toward the ID decision boundaries, a translation that
/// corrupts the primary cue plane while leaving the secondary cue intact, and a
/// wider-noise set with a skewed label prior.
inline std::vector<ShiftSpec> default_benchmark_shifts(std::size_t d, std::size_t C) {
    std::vector<ShiftSpec> shifts(3);
    shifts[0].name = "rotate";
    shifts[0].rotation_angle = 0.9;
    shifts[0].noise_scale = 1.0;

    shifts[1].name = "translate";
    shifts[1].mean_shift.assign(d, 0.0);
    shifts[1].mean_shift[0] = 2.0;
    shifts[1].mean_shift[1] = -1.5;
    if (d > 4) {
        shifts[1].mean_shift[4] = 0.8;
    }
    if (d > 5) {
        shifts[1].mean_shift[5] = -0.8;
    }
    shifts[1].noise_scale = 1.1;

    shifts[2].name = "widen";
    shifts[2].rotation_angle = -0.25;
    shifts[2].noise_scale = 1.4;
    shifts[2].label_prior.assign(C, 0.0);
    if (C == 3) {
        shifts[2].label_prior = {0.5, 0.3, 0.2};
    } else {
        shifts[2].label_prior.assign(C, 1.0 / static_cast<double>(C));
    }
    return shifts;
}

} // namespace fedgnp
