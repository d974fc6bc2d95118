#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedgnp/datagen.hpp"
#include "fedgnp/indicators.hpp"
#include "fedgnp/model.hpp"
#include "fedgnp/param_set.hpp"
#include "fedgnp/rng.hpp"

namespace fedgnp {

// Stream tags for the per-round derived RNGs.
inline constexpr std::uint64_t kStreamSampling = 0x73616d70;
inline constexpr std::uint64_t kStreamClient = 0x636c6e74;
inline constexpr std::uint64_t kStreamNoise = 0x6e6f6973;
inline constexpr std::uint64_t kStreamClientBatches = 0x62617463;

enum class ProjectionScope { GlobalVector, PerTensor };

inline ProjectionScope parse_projection_scope(const std::string& text) {
    if (text == "global") {
        return ProjectionScope::GlobalVector;
    }
    if (text == "per_tensor") {
        return ProjectionScope::PerTensor;
    }
    throw std::invalid_argument("projection_scope must be 'global' or 'per_tensor'");
}

inline std::string to_string(ProjectionScope scope) {
    return scope == ProjectionScope::GlobalVector ? "global" : "per_tensor";
}

/// All hyperparameters of one federated run.
struct FedConfig {
    std::size_t clients = 10;         // K
    std::size_t rounds = 50;          // T
    std::size_t local_epochs = 1;     // E
    double eta = 0.05;                // learning rate
    double sampling_rate = 0.5;       // c, in (0, 1]
    double alpha = 1.0;               // Dirichlet concentration
    double tau = 20.0;                // value-model coefficient
    double gamma_max = 1.0;           // gamma clamp ceiling
    std::size_t indicator_period = 10;
    PeftMask mask = PeftMask::full();
    bool noise_enabled = true;
    bool gnp_enabled = false;
    ProjectionScope projection_scope = ProjectionScope::GlobalVector;
    std::size_t steps_per_epoch = 1;
    std::size_t batch_size = 32;
    std::uint64_t seed = 1;
    // Model and data dimensions.
    std::size_t feature_dim = 32;  // d
    std::size_t hidden_dim = 64;   // h
    std::size_t num_classes = 3;   // C
    std::size_t n_train = 3000;
    std::size_t n_test = 1000;
    std::vector<ShiftSpec> shifts;

    std::size_t sampled_clients() const {
        return static_cast<std::size_t>(std::ceil(sampling_rate * static_cast<double>(clients)));
    }

    bool operator==(const FedConfig& other) const = default;
};

/// Per-round observations appended to the run log.
struct RoundRecord {
    std::size_t round = 0;
    std::vector<std::size_t> participants;
    double train_loss = 0.0;
    double robust_norm = 0.0;
    double noise_norm = 0.0;
    double gamma = 0.0;
    bool clamped = false;
    double id_accuracy = 0.0;
    std::vector<double> ood_accuracies;
    std::optional<IndicatorSnapshot> snapshot;
};

struct RunLog {
    std::vector<RoundRecord> rounds;
    MlpClassifier final_model;
};

struct ClientResult {
    ParamSet params; // trainable tensors only
    double mean_loss = 0.0;
};

/// Seed derivations shared between run() and the reference loops in the tests.
inline std::uint64_t client_update_seed(const FedConfig& cfg, std::size_t round, std::size_t client) {
    return mix_seed(cfg.seed, kStreamClient, round, client);
}

inline SeededRng sampling_rng(const FedConfig& cfg, std::size_t round) {
    return SeededRng(cfg.seed, mix_seed(kStreamSampling, round));
}

inline SeededRng noise_rng(const FedConfig& cfg, std::size_t round) {
    return SeededRng(cfg.seed, mix_seed(kStreamNoise, round));
}

inline MlpClassifier initial_model(const FedConfig& cfg) {
    return init(mix_seed(cfg.seed, kStreamModelInit), cfg.feature_dim, cfg.hidden_dim, cfg.num_classes, cfg.mask);
}

/// The m = ceil(c*K) participants of one round, uniform without replacement, sorted.
inline std::vector<std::size_t> sample_clients(const FedConfig& cfg, std::size_t round) {
    SeededRng rng = sampling_rng(cfg, round);
    auto ids = rng.sample_without_replacement(cfg.clients, cfg.sampled_clients());
    std::sort(ids.begin(), ids.end());
    return ids;
}

/// E local epochs x steps_per_epoch minibatch SGD steps starting from the received
/// global weights. Returns the trainable tensors and the mean minibatch loss.
/// Deterministic in (global, shard, client_seed); batches are drawn without
/// replacement from a stream derived only from client_seed.
inline ClientResult client_update(const MlpClassifier& global, const Dataset& shard, const FedConfig& cfg,
                                  std::uint64_t client_seed) {
    if (shard.size() == 0) {
        throw std::invalid_argument("client_update: empty shard");
    }
    MlpClassifier local = global;
    SeededRng rng(client_seed, kStreamClientBatches);
    const std::size_t batch = std::min(cfg.batch_size, shard.size());
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        for (std::size_t step = 0; step < cfg.steps_per_epoch; ++step) {
            const auto indices = rng.sample_without_replacement(shard.size(), batch);
            const auto lg = loss_and_grad(local, shard, indices);
            local = sgd_step(local, lg.grads, cfg.eta);
            loss_sum += lg.loss;
            ++steps;
        }
    }
    return ClientResult{local.params.trainable_subset(), steps > 0 ? loss_sum / static_cast<double>(steps) : 0.0};
}

/// Shard-size-weighted mean of the client parameter sets.
inline ParamSet aggregate(const std::vector<ParamSet>& locals, const std::vector<std::size_t>& sizes) {
    if (locals.empty() || locals.size() != sizes.size()) {
        throw std::invalid_argument("aggregate: need one size per nonempty client list");
    }
    double total = 0.0;
    for (std::size_t s : sizes) {
        if (s == 0) {
            throw std::invalid_argument("aggregate: client sizes must be positive");
        }
        total += static_cast<double>(s);
    }
    ParamSet out = locals.front().zeros_like();
    for (std::size_t k = 0; k < locals.size(); ++k) {
        require_compatible(out, locals[k], "aggregate");
        const double w = static_cast<double>(sizes[k]) / total;
        auto it = out.tensors.begin();
        auto jt = locals[k].tensors.begin();
        for (; it != out.tensors.end(); ++it, ++jt) {
            auto& x = it->second.data;
            const auto& y = jt->second.data;
            for (std::size_t i = 0; i < x.size(); ++i) {
                x[i] += w * y[i];
            }
        }
    }
    return out;
}

/// Robust vector: the component of the new aggregate orthogonal to the previous
/// global model under the Frobenius inner product. Global scope projects the whole
/// flattened vector with one coefficient; per-tensor scope projects tensor by tensor.
inline ParamSet robust_vector(const ParamSet& theta_prev_global, const ParamSet& theta_new, ProjectionScope scope) {
    require_compatible(theta_prev_global, theta_new, "robust_vector");
    if (scope == ProjectionScope::GlobalVector) {
        return axpy(theta_new, -1.0, project(theta_prev_global, theta_new));
    }
    ParamSet out = theta_new;
    auto it = out.tensors.begin();
    auto jt = theta_prev_global.tensors.begin();
    for (; it != out.tensors.end(); ++it, ++jt) {
        it->second = sub(it->second, project(jt->second, it->second));
    }
    return out;
}

/// The noisy-projection server update: theta_new - gamma * (theta_r - theta_n),
/// with theta_n fresh Gaussian noise rescaled to the norm of theta_r (zero when
/// noise is disabled or theta_r vanishes).
inline ParamSet gnp_update(const ParamSet& theta_new, const ParamSet& theta_r, double gamma, SeededRng& rng,
                           bool noise_enabled, double* noise_norm_out = nullptr) {
    require_compatible(theta_new, theta_r, "gnp_update");
    if (gamma < 0.0) {
        throw std::invalid_argument("gnp_update: gamma must be nonnegative");
    }
    const double robust_norm = theta_r.frobenius_norm();
    ParamSet theta_n = theta_r.zeros_like();
    if (noise_enabled && robust_norm > 0.0) {
        theta_n = scale_to_norm(gaussian_like(theta_r, rng), robust_norm);
    }
    if (noise_norm_out != nullptr) {
        *noise_norm_out = theta_n.frobenius_norm();
    }
    return axpy(theta_new, -gamma, axpy(theta_r, -1.0, theta_n));
}

/// Executes T communication rounds of the federated loop. Per round: on indicator
/// rounds (round % indicator_period == 0) measure the classifier-layer snapshot of
/// the current global model against the previous round's and refresh gamma; sample
/// clients, run local updates, aggregate; apply the noisy-projection update when
/// enabled; evaluate ID and OOD accuracy. Gamma starts at 1.0 (clamped into
/// [0, gamma_max]). Any error aborts the run tagged with the round index.
inline RunLog run(const FedConfig& cfg, const GeneratedData& data, const Partition& part) {
    if (cfg.rounds < 1) {
        throw std::invalid_argument("run: need at least one round");
    }
    if (cfg.sampled_clients() < 1 || cfg.sampling_rate <= 0.0 || cfg.sampling_rate > 1.0) {
        throw std::invalid_argument("run: sampling rate must be in (0, 1]");
    }
    if (part.clients() != cfg.clients) {
        throw std::invalid_argument("run: partition client count does not match config");
    }

    std::vector<Dataset> shards(cfg.clients);
    for (std::size_t k = 0; k < cfg.clients; ++k) {
        if (part.client_indices[k].empty()) {
            throw std::invalid_argument("run: client " + std::to_string(k) + " has an empty shard");
        }
        Dataset& shard = shards[k];
        shard.num_classes = data.id_train.num_classes;
        shard.name = "client_" + std::to_string(k);
        for (std::size_t idx : part.client_indices[k]) {
            shard.features.push_back(data.id_train.features[idx]);
            shard.labels.push_back(data.id_train.labels[idx]);
        }
    }

    RunLog log;
    MlpClassifier global = initial_model(cfg);
    // Classifier layer of the model broadcast one round earlier; the GDA reference.
    Matrix prev_classifier = global.params.tensors.at("Wc");
    double gamma = std::min(1.0, cfg.gamma_max);

    for (std::size_t t = 1; t <= cfg.rounds; ++t) {
        try {
            RoundRecord rec;
            rec.round = t;

            // Indicators are measured on the global model the server holds when the
            // round starts, against the model broadcast one round earlier; the
            // refreshed gamma applies from this round's update onward.
            const Matrix& classifier_curr = global.params.tensors.at("Wc");
            if (t % cfg.indicator_period == 0) {
                rec.snapshot = snapshot(prev_classifier, classifier_curr, cfg.tau, t, cfg.gamma_max);
                gamma = rec.snapshot->gamma;
                rec.clamped = rec.snapshot->clamped;
            }
            prev_classifier = classifier_curr;

            // The projection base is the model broadcast this round (round 1 uses
            // the initialized model), the only global state the server retains.
            const ParamSet prev_global = global.params.trainable_subset();

            rec.participants = sample_clients(cfg, t);

            std::vector<ParamSet> locals;
            std::vector<std::size_t> sizes;
            double loss_weighted = 0.0;
            for (std::size_t k : rec.participants) {
                auto result = client_update(global, shards[k], cfg, client_update_seed(cfg, t, k));
                loss_weighted += static_cast<double>(shards[k].size()) * result.mean_loss;
                locals.push_back(std::move(result.params));
                sizes.push_back(shards[k].size());
            }
            ParamSet theta_new = aggregate(locals, sizes);
            double size_total = 0.0;
            for (std::size_t s : sizes) {
                size_total += static_cast<double>(s);
            }
            rec.train_loss = loss_weighted / size_total;

            ParamSet theta_r = robust_vector(prev_global, theta_new, cfg.projection_scope);
            rec.robust_norm = theta_r.frobenius_norm();
            rec.gamma = gamma;

            ParamSet updated = theta_new;
            if (cfg.gnp_enabled) {
                SeededRng rng = noise_rng(cfg, t);
                updated = gnp_update(theta_new, theta_r, gamma, rng, cfg.noise_enabled, &rec.noise_norm);
            }
            global.params.assign_tensors(updated);

            rec.id_accuracy = accuracy(global, data.id_test);
            for (const Dataset& ood : data.ood_tests) {
                rec.ood_accuracies.push_back(accuracy(global, ood));
            }
            log.rounds.push_back(std::move(rec));
        } catch (const std::exception& e) {
            throw std::runtime_error("run: round " + std::to_string(t) + ": " + e.what());
        }
    }
    log.final_model = std::move(global);
    return log;
}

} // namespace fedgnp
