#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "fedgnp/federation.hpp"

using namespace fedgnp;

namespace {

FedConfig small_config() {
    FedConfig cfg;
    cfg.clients = 4;
    cfg.rounds = 8;
    cfg.local_epochs = 1;
    cfg.eta = 0.05;
    cfg.sampling_rate = 0.5;
    cfg.alpha = 0.3;
    cfg.batch_size = 16;
    cfg.feature_dim = 6;
    cfg.hidden_dim = 8;
    cfg.num_classes = 3;
    cfg.n_train = 200;
    cfg.n_test = 50;
    cfg.seed = 12;
    cfg.shifts = default_benchmark_shifts(cfg.feature_dim, cfg.num_classes);
    return cfg;
}

struct Scenario {
    FedConfig cfg;
    GeneratedData data;
    Partition part;
};

Scenario make_scenario(FedConfig cfg) {
    GeneratedData data =
        generate(mix_seed(cfg.seed, 0xd), cfg.n_train, cfg.n_test, cfg.feature_dim, cfg.num_classes, cfg.shifts);
    Partition part = dirichlet_partition(data.id_train, cfg.clients, cfg.alpha, mix_seed(cfg.seed, 0xe));
    return {std::move(cfg), std::move(data), std::move(part)};
}

Dataset shard_of(const Scenario& sc, std::size_t client) {
    Dataset shard;
    shard.num_classes = sc.data.id_train.num_classes;
    for (std::size_t idx : sc.part.client_indices[client]) {
        shard.features.push_back(sc.data.id_train.features[idx]);
        shard.labels.push_back(sc.data.id_train.labels[idx]);
    }
    return shard;
}

ParamSet pair_params(double x, double y) {
    ParamSet p;
    Matrix m(1, 2);
    m.data = {x, y};
    p.tensors.emplace("w", std::move(m));
    p.trainable = {"w"};
    return p;
}

ParamSet const_params(double value) {
    ParamSet p;
    p.tensors.emplace("w", Matrix(2, 2, value));
    p.trainable = {"w"};
    return p;
}

// Plain FedAvg loop written out by hand: same sampling, client updates and
// weight order as run(), but none of its plumbing.
MlpClassifier reference_fedavg(const Scenario& sc) {
    const FedConfig& cfg = sc.cfg;
    std::vector<Dataset> shards;
    for (std::size_t k = 0; k < cfg.clients; ++k) {
        shards.push_back(shard_of(sc, k));
    }
    MlpClassifier global = initial_model(cfg);
    for (std::size_t t = 1; t <= cfg.rounds; ++t) {
        const auto ids = sample_clients(cfg, t);
        std::vector<ParamSet> locals;
        double total = 0.0;
        for (std::size_t k : ids) {
            locals.push_back(client_update(global, shards[k], cfg, client_update_seed(cfg, t, k)).params);
            total += static_cast<double>(shards[k].size());
        }
        ParamSet mean = locals.front().zeros_like();
        for (std::size_t i = 0; i < locals.size(); ++i) {
            const double w = static_cast<double>(shards[ids[i]].size()) / total;
            auto it = mean.tensors.begin();
            auto jt = locals[i].tensors.begin();
            for (; it != mean.tensors.end(); ++it, ++jt) {
                for (std::size_t e = 0; e < it->second.data.size(); ++e) {
                    it->second.data[e] += w * jt->second.data[e];
                }
            }
        }
        global.params.assign_tensors(mean);
    }
    return global;
}

} // namespace

TEST(ClientUpdate, ZeroRateReturnsReceivedParams) {
    Scenario sc = make_scenario(small_config());
    sc.cfg.eta = 0.0;
    const MlpClassifier global = initial_model(sc.cfg);
    const auto result = client_update(global, shard_of(sc, 0), sc.cfg, 321);
    EXPECT_EQ(result.params, global.params.trainable_subset());
}

TEST(ClientUpdate, SingleStepMatchesHandComputedSgd) {
    Scenario sc = make_scenario(small_config());
    sc.cfg.local_epochs = 1;
    sc.cfg.steps_per_epoch = 1;
    const MlpClassifier global = initial_model(sc.cfg);
    const Dataset shard = shard_of(sc, 1);
    const std::uint64_t seed = 777;

    const auto result = client_update(global, shard, sc.cfg, seed);

    // Oracle: re-derive the batch, apply loss_and_grad + sgd_step once.
    SeededRng rng(seed, kStreamClientBatches);
    const auto idx = rng.sample_without_replacement(shard.size(), std::min(sc.cfg.batch_size, shard.size()));
    const auto lg = loss_and_grad(global, shard, idx);
    const MlpClassifier stepped = sgd_step(global, lg.grads, sc.cfg.eta);
    EXPECT_EQ(result.params, stepped.params.trainable_subset());
    EXPECT_DOUBLE_EQ(result.mean_loss, lg.loss);
}

TEST(ClientUpdate, DeterministicPerSeed) {
    Scenario sc = make_scenario(small_config());
    const MlpClassifier global = initial_model(sc.cfg);
    const Dataset shard = shard_of(sc, 2);
    const auto a = client_update(global, shard, sc.cfg, 99);
    const auto b = client_update(global, shard, sc.cfg, 99);
    EXPECT_EQ(a.params, b.params);
    const auto c = client_update(global, shard, sc.cfg, 100);
    EXPECT_NE(c.params, a.params);

    Dataset empty;
    empty.num_classes = 3;
    EXPECT_THROW(client_update(global, empty, sc.cfg, 1), std::invalid_argument);
}

TEST(Aggregate, WeightedMeanCases) {
    const ParamSet one = const_params(1.0);
    const ParamSet three = const_params(3.0);
    const ParamSet mean = aggregate({one, three}, {5, 5});
    for (double v : mean.tensors.at("w").data) {
        EXPECT_DOUBLE_EQ(v, 2.0);
    }

    const ParamSet solo = aggregate({three}, {7});
    EXPECT_EQ(solo.tensors.at("w").data, three.tensors.at("w").data);

    const ParamSet skew = aggregate({const_params(0.0), const_params(4.0)}, {1, 3});
    for (double v : skew.tensors.at("w").data) {
        EXPECT_DOUBLE_EQ(v, 3.0);
    }

    EXPECT_THROW(aggregate({}, {}), std::invalid_argument);
    EXPECT_THROW(aggregate({one, three}, {1, 0}), std::invalid_argument);
    EXPECT_THROW(aggregate({one, pair_params(1, 2)}, {1, 1}), std::invalid_argument);
}

TEST(Aggregate, MatchesBruteForceOnRandomClients) {
    SeededRng rng(404);
    std::vector<ParamSet> locals;
    std::vector<std::size_t> sizes{3, 11, 6};
    for (int k = 0; k < 3; ++k) {
        ParamSet p;
        Matrix a(2, 3), b(4, 1);
        for (double& v : a.data) {
            v = rng.normal();
        }
        for (double& v : b.data) {
            v = rng.normal();
        }
        p.tensors.emplace("a", std::move(a));
        p.tensors.emplace("b", std::move(b));
        locals.push_back(std::move(p));
    }
    const ParamSet got = aggregate(locals, sizes);
    const double total = 20.0;
    for (const auto& [name, t] : got.tensors) {
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            double expected = 0.0;
            for (std::size_t k = 0; k < locals.size(); ++k) {
                expected += static_cast<double>(sizes[k]) / total * locals[k].tensors.at(name).data[i];
            }
            EXPECT_NEAR(t.data[i], expected, 1e-12);
        }
    }
}

TEST(RobustVector, ParallelAndHandCases) {
    const ParamSet prev = pair_params(1.0, 0.0);
    const ParamSet parallel = robust_vector(scaled(prev, 1.0), scaled(prev, 1.5), ProjectionScope::GlobalVector);
    EXPECT_NEAR(parallel.frobenius_norm(), 0.0, 1e-12);

    const ParamSet r = robust_vector(prev, pair_params(3.0, 4.0), ProjectionScope::GlobalVector);
    EXPECT_NEAR(r.tensors.at("w").data[0], 0.0, 1e-12);
    EXPECT_NEAR(r.tensors.at("w").data[1], 4.0, 1e-12);
}

TEST(RobustVector, PythagoreanDecomposition) {
    SeededRng rng(505);
    for (int trial = 0; trial < 30; ++trial) {
        ParamSet prev, curr;
        for (const char* name : {"x", "y"}) {
            Matrix a(3, 3), b(3, 3);
            for (double& v : a.data) {
                v = rng.normal();
            }
            for (double& v : b.data) {
                v = rng.normal();
            }
            prev.tensors.emplace(name, std::move(a));
            curr.tensors.emplace(name, std::move(b));
        }
        const ParamSet r = robust_vector(prev, curr, ProjectionScope::GlobalVector);
        const ParamSet p = project(prev, curr);
        const double lhs = curr.frobenius_norm() * curr.frobenius_norm();
        const double rhs = p.frobenius_norm() * p.frobenius_norm() + r.frobenius_norm() * r.frobenius_norm();
        EXPECT_NEAR(lhs / rhs, 1.0, 1e-9);
        EXPECT_LE(std::abs(frob_inner(r, prev)), 1e-9 * prev.frobenius_norm() * curr.frobenius_norm());
    }
}

TEST(RobustVector, PerTensorScopeProjectsEachTensor) {
    ParamSet prev, curr;
    Matrix p1(1, 2), c1(1, 2), p2(1, 2), c2(1, 2);
    p1.data = {1.0, 0.0};
    c1.data = {3.0, 4.0};
    p2.data = {0.0, 2.0};
    c2.data = {5.0, 6.0};
    prev.tensors.emplace("u", p1);
    prev.tensors.emplace("v", p2);
    curr.tensors.emplace("u", c1);
    curr.tensors.emplace("v", c2);
    const ParamSet r = robust_vector(prev, curr, ProjectionScope::PerTensor);
    EXPECT_NEAR(r.tensors.at("u").data[0], 0.0, 1e-12);
    EXPECT_NEAR(r.tensors.at("u").data[1], 4.0, 1e-12);
    EXPECT_NEAR(r.tensors.at("v").data[0], 5.0, 1e-12);
    EXPECT_NEAR(r.tensors.at("v").data[1], 0.0, 1e-12);
}

TEST(GnpUpdate, GammaZeroAndZeroRobustVectorAreNoOps) {
    SeededRng rng(606);
    const ParamSet theta = pair_params(2.0, -1.0);
    const ParamSet r = pair_params(0.5, 0.5);
    SeededRng noise(1, 2);
    EXPECT_EQ(gnp_update(theta, r, 0.0, noise, true), theta);

    SeededRng noise2(1, 2);
    double noise_norm = -1.0;
    const ParamSet same = gnp_update(theta, theta.zeros_like(), 1.0, noise2, true, &noise_norm);
    EXPECT_EQ(same, theta);
    EXPECT_DOUBLE_EQ(noise_norm, 0.0);
    (void)rng;
}

TEST(GnpUpdate, GammaOneNoiseOffIsThePureProjection) {
    SeededRng rng(707);
    ParamSet prev, curr;
    Matrix a(4, 2), b(4, 2);
    for (double& v : a.data) {
        v = rng.normal();
    }
    for (double& v : b.data) {
        v = rng.normal();
    }
    prev.tensors.emplace("w", std::move(a));
    curr.tensors.emplace("w", std::move(b));
    const ParamSet r = robust_vector(prev, curr, ProjectionScope::GlobalVector);
    SeededRng noise(1, 3);
    const ParamSet updated = gnp_update(curr, r, 1.0, noise, false);
    const ParamSet projection = project(prev, curr);
    const ParamSet diff = axpy(updated, -1.0, projection);
    EXPECT_LE(diff.frobenius_norm(), 1e-12 * std::max(1.0, projection.frobenius_norm()));
}

TEST(GnpUpdate, NoiseNormMatchesRobustNorm) {
    SeededRng rng(808);
    ParamSet theta, r;
    Matrix a(5, 5), b(5, 5);
    for (double& v : a.data) {
        v = rng.normal();
    }
    for (double& v : b.data) {
        v = rng.normal();
    }
    theta.tensors.emplace("w", std::move(a));
    r.tensors.emplace("w", std::move(b));
    SeededRng noise(9, 9);
    double noise_norm = 0.0;
    gnp_update(theta, r, 0.7, noise, true, &noise_norm);
    EXPECT_NEAR(noise_norm / r.frobenius_norm(), 1.0, 1e-9);
}

TEST(Run, GnpOffMatchesReferenceFedAvgBitwise) {
    const Scenario sc = make_scenario(small_config());
    const RunLog log = run(sc.cfg, sc.data, sc.part);
    const MlpClassifier reference = reference_fedavg(sc);
    EXPECT_EQ(log.final_model.params, reference.params);
}

TEST(Run, SingleClientFullSamplingEqualsCentralizedSgd) {
    FedConfig cfg = small_config();
    cfg.clients = 1;
    cfg.sampling_rate = 1.0;
    cfg.local_epochs = 2;
    cfg.steps_per_epoch = 2;
    cfg.batch_size = cfg.n_train; // full-batch steps cover the shard
    const Scenario sc = make_scenario(cfg);
    const RunLog log = run(sc.cfg, sc.data, sc.part);

    const Dataset shard = shard_of(sc, 0);
    MlpClassifier model = initial_model(sc.cfg);
    for (std::size_t t = 1; t <= cfg.rounds; ++t) {
        SeededRng rng(client_update_seed(sc.cfg, t, 0), kStreamClientBatches);
        for (std::size_t step = 0; step < cfg.local_epochs * cfg.steps_per_epoch; ++step) {
            const auto idx = rng.sample_without_replacement(shard.size(), std::min(cfg.batch_size, shard.size()));
            const auto lg = loss_and_grad(model, shard, idx);
            model = sgd_step(model, lg.grads, cfg.eta);
        }
    }
    EXPECT_EQ(log.final_model.params.trainable_subset(), model.params.trainable_subset());
}

TEST(Run, GammaStartsAtOneBeforeAnyRefresh) {
    FedConfig cfg = small_config();
    cfg.rounds = 1;
    cfg.gnp_enabled = true;
    const Scenario sc = make_scenario(cfg);
    const RunLog log = run(sc.cfg, sc.data, sc.part);
    ASSERT_EQ(log.rounds.size(), 1u);
    EXPECT_DOUBLE_EQ(log.rounds[0].gamma, 1.0);
    EXPECT_FALSE(log.rounds[0].snapshot.has_value());
}

TEST(Run, SnapshotCadenceFollowsIndicatorPeriod) {
    FedConfig cfg = small_config();
    cfg.rounds = 12;
    cfg.indicator_period = 5;
    cfg.gnp_enabled = true;
    const Scenario sc = make_scenario(cfg);
    const RunLog log = run(sc.cfg, sc.data, sc.part);
    for (const RoundRecord& rec : log.rounds) {
        EXPECT_EQ(rec.snapshot.has_value(), rec.round % 5 == 0) << "round " << rec.round;
        if (rec.snapshot) {
            EXPECT_DOUBLE_EQ(rec.gamma, rec.snapshot->gamma);
        }
    }
}

TEST(Run, FrozenTensorsNeverChangeUnderAnyMask) {
    for (const PeftMask& mask :
         {PeftMask::full(), PeftMask::bias_only(), PeftMask::low_rank(3), PeftMask::bottleneck(4)}) {
        FedConfig cfg = small_config();
        cfg.mask = mask;
        cfg.gnp_enabled = true;
        const Scenario sc = make_scenario(cfg);
        const RunLog log = run(sc.cfg, sc.data, sc.part);
        const MlpClassifier fresh = initial_model(sc.cfg);
        for (const auto& [name, t] : fresh.params.tensors) {
            if (fresh.params.trainable.count(name) == 0) {
                EXPECT_EQ(log.final_model.params.tensors.at(name), t) << mask.to_string() << " " << name;
            }
        }
    }
}

TEST(Run, NoiseNormContractHoldsThroughout) {
    FedConfig cfg = small_config();
    cfg.rounds = 20;
    cfg.gnp_enabled = true;
    const Scenario sc = make_scenario(cfg);
    const RunLog log = run(sc.cfg, sc.data, sc.part);
    for (const RoundRecord& rec : log.rounds) {
        if (rec.robust_norm > 0.0) {
            EXPECT_NEAR(rec.noise_norm / rec.robust_norm, 1.0, 1e-9) << "round " << rec.round;
        }
    }
}

TEST(Run, IdenticalConfigsReproduceIdenticalLogs) {
    FedConfig cfg = small_config();
    cfg.gnp_enabled = true;
    const Scenario sc = make_scenario(cfg);
    const RunLog a = run(sc.cfg, sc.data, sc.part);
    const RunLog b = run(sc.cfg, sc.data, sc.part);
    ASSERT_EQ(a.rounds.size(), b.rounds.size());
    for (std::size_t i = 0; i < a.rounds.size(); ++i) {
        EXPECT_EQ(a.rounds[i].participants, b.rounds[i].participants);
        EXPECT_EQ(a.rounds[i].id_accuracy, b.rounds[i].id_accuracy);
        EXPECT_EQ(a.rounds[i].ood_accuracies, b.rounds[i].ood_accuracies);
        EXPECT_EQ(a.rounds[i].robust_norm, b.rounds[i].robust_norm);
        EXPECT_EQ(a.rounds[i].noise_norm, b.rounds[i].noise_norm);
    }
    EXPECT_EQ(a.final_model.params, b.final_model.params);
}

TEST(Run, ZeroGammaCeilingDegeneratesToFedAvg) {
    FedConfig base = small_config();
    const Scenario plain = make_scenario(base);
    const RunLog fedavg = run(plain.cfg, plain.data, plain.part);

    FedConfig gnp_cfg = base;
    gnp_cfg.gnp_enabled = true;
    gnp_cfg.gamma_max = 0.0;
    const RunLog gnp_log = run(gnp_cfg, plain.data, plain.part);

    EXPECT_EQ(gnp_log.final_model.params, fedavg.final_model.params);
    for (std::size_t i = 0; i < fedavg.rounds.size(); ++i) {
        EXPECT_EQ(gnp_log.rounds[i].id_accuracy, fedavg.rounds[i].id_accuracy);
        EXPECT_EQ(gnp_log.rounds[i].ood_accuracies, fedavg.rounds[i].ood_accuracies);
    }
}

TEST(Run, RejectsInvalidSetups) {
    FedConfig cfg = small_config();
    const Scenario sc = make_scenario(cfg);
    FedConfig bad = cfg;
    bad.clients = 5; // partition has 4
    EXPECT_THROW(run(bad, sc.data, sc.part), std::invalid_argument);
    FedConfig bad_rate = cfg;
    bad_rate.sampling_rate = 0.0;
    EXPECT_THROW(run(bad_rate, sc.data, sc.part), std::invalid_argument);
}
