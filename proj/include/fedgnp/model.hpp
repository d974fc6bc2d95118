#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedgnp/datagen.hpp"
#include "fedgnp/param_set.hpp"
#include "fedgnp/rng.hpp"

namespace fedgnp {

inline constexpr std::uint64_t kStreamModelInit = 0x6d6f'6465;

enum class PeftMode { Full, BiasOnly, LowRank, Bottleneck };

/// Which parameters train. Full updates everything; BiasOnly only the two bias
/// vectors; LowRank freezes W1 and learns factors A (r x d) and B (h x r) so the
/// effective hidden weight is W1 + B*A; Bottleneck inserts a residual h -> h_b -> h
/// block after the hidden activation. LowRank and Bottleneck keep the head trainable.
struct PeftMask {
    PeftMode mode = PeftMode::Full;
    std::size_t rank = 0;           // LowRank factor rank r
    std::size_t bottleneck_dim = 0; // Bottleneck hidden width h_b

    static PeftMask full() { return {PeftMode::Full, 0, 0}; }
    static PeftMask bias_only() { return {PeftMode::BiasOnly, 0, 0}; }
    static PeftMask low_rank(std::size_t r) { return {PeftMode::LowRank, r, 0}; }
    static PeftMask bottleneck(std::size_t hb) { return {PeftMode::Bottleneck, 0, hb}; }

    /// Parses "full", "bias_only", "low_rank:R", "bottleneck:H".
    static PeftMask parse(const std::string& text) {
        if (text == "full") {
            return full();
        }
        if (text == "bias_only") {
            return bias_only();
        }
        const auto colon = text.find(':');
        if (colon != std::string::npos) {
            const std::string head = text.substr(0, colon);
            const std::string arg = text.substr(colon + 1);
            std::size_t value = 0;
            try {
                value = static_cast<std::size_t>(std::stoull(arg));
            } catch (...) {
                throw std::invalid_argument("PeftMask: bad size in '" + text + "'");
            }
            if (value == 0) {
                throw std::invalid_argument("PeftMask: size must be positive in '" + text + "'");
            }
            if (head == "low_rank") {
                return low_rank(value);
            }
            if (head == "bottleneck") {
                return bottleneck(value);
            }
        }
        throw std::invalid_argument("PeftMask: unknown mask '" + text + "'");
    }

    std::string to_string() const {
        switch (mode) {
        case PeftMode::Full:
            return "full";
        case PeftMode::BiasOnly:
            return "bias_only";
        case PeftMode::LowRank:
            return "low_rank:" + std::to_string(rank);
        case PeftMode::Bottleneck:
            return "bottleneck:" + std::to_string(bottleneck_dim);
        }
        return "full";
    }

    std::set<std::string> trainable_names() const {
        switch (mode) {
        case PeftMode::Full:
            return {"W1", "b1", "Wc", "bc"};
        case PeftMode::BiasOnly:
            return {"b1", "bc"};
        case PeftMode::LowRank:
            return {"A", "B", "Wc", "bc"};
        case PeftMode::Bottleneck:
            return {"Wd", "Wu", "Wc", "bc"};
        }
        return {};
    }

    bool operator==(const PeftMask& other) const = default;
};

/// One-hidden-layer tanh classifier. The tensor named "Wc" is the designated
/// classifier weight layer for all indicator computations.
struct MlpClassifier {
    ParamSet params;
    PeftMask mask;
    std::size_t input_dim = 0;
    std::size_t hidden_dim = 0;
    std::size_t num_classes = 0;
};

inline MlpClassifier init(std::uint64_t seed, std::size_t d, std::size_t h, std::size_t C, const PeftMask& mask) {
    if (d < 1 || h < 1 || C < 1) {
        throw std::invalid_argument("init: dimensions must be positive");
    }
    if (mask.mode == PeftMode::LowRank && (mask.rank < 1 || mask.rank > std::min(h, d))) {
        throw std::invalid_argument("init: low-rank factor rank must be in [1, min(h, d)]");
    }
    if (mask.mode == PeftMode::Bottleneck && mask.bottleneck_dim < 1) {
        throw std::invalid_argument("init: bottleneck width must be positive");
    }
    MlpClassifier model;
    model.mask = mask;
    model.input_dim = d;
    model.hidden_dim = h;
    model.num_classes = C;

    SeededRng rng(seed, kStreamModelInit);
    auto filled = [&rng](std::size_t rows, std::size_t cols, double scale) {
        Matrix t(rows, cols);
        for (double& v : t.data) {
            v = rng.uniform(-scale, scale);
        }
        return t;
    };
    const double s_in = 1.0 / std::sqrt(static_cast<double>(d));
    const double s_hid = 1.0 / std::sqrt(static_cast<double>(h));

    // Base tensors consume the same draws under every mask, so a masked model shares
    // its frozen base with the Full model of the same seed.
    model.params.tensors.emplace("W1", filled(h, d, s_in));
    model.params.tensors.emplace("b1", filled(h, 1, s_in));
    model.params.tensors.emplace("Wc", filled(C, h, s_hid));
    model.params.tensors.emplace("bc", filled(C, 1, s_hid));
    if (mask.mode == PeftMode::LowRank) {
        model.params.tensors.emplace("A", filled(mask.rank, d, s_in));
        model.params.tensors.emplace("B", Matrix(h, mask.rank)); // zero: initial model equals the frozen base
    } else if (mask.mode == PeftMode::Bottleneck) {
        model.params.tensors.emplace("Wd", filled(mask.bottleneck_dim, h, s_hid));
        model.params.tensors.emplace("Wu", Matrix(h, mask.bottleneck_dim)); // zero: block starts as identity
    }
    model.params.trainable = mask.trainable_names();
    return model;
}

inline std::size_t trainable_parameter_count(const MlpClassifier& model) {
    std::size_t n = 0;
    for (const auto& name : model.params.trainable) {
        n += model.params.tensors.at(name).size();
    }
    return n;
}

inline double trainable_ratio(const MlpClassifier& model) {
    return static_cast<double>(trainable_parameter_count(model)) / static_cast<double>(model.params.total_size());
}

namespace detail {

struct ForwardCache {
    std::vector<double> hidden;      // tanh(W1_eff x + b1)
    std::vector<double> hidden_out;  // after the bottleneck block (== hidden otherwise)
    std::vector<double> adapter_pre; // tanh(Wd * hidden), bottleneck only
    std::vector<double> factor_in;   // A * x, low-rank only
    std::vector<double> logits;
};

inline ForwardCache forward_cached(const MlpClassifier& model, std::span<const double> x) {
    if (x.size() != model.input_dim) {
        throw std::invalid_argument("forward: input dimension mismatch");
    }
    const auto& P = model.params.tensors;
    const Matrix& W1 = P.at("W1");
    const Matrix& b1 = P.at("b1");
    const Matrix& Wc = P.at("Wc");
    const Matrix& bc = P.at("bc");
    const std::size_t h = model.hidden_dim;
    const std::size_t C = model.num_classes;

    ForwardCache cache;
    std::vector<double> z1(h);
    for (std::size_t i = 0; i < h; ++i) {
        double acc = b1.data[i];
        for (std::size_t j = 0; j < model.input_dim; ++j) {
            acc += W1(i, j) * x[j];
        }
        z1[i] = acc;
    }
    if (model.mask.mode == PeftMode::LowRank) {
        const Matrix& A = P.at("A");
        const Matrix& B = P.at("B");
        cache.factor_in.resize(model.mask.rank);
        for (std::size_t r = 0; r < model.mask.rank; ++r) {
            double acc = 0.0;
            for (std::size_t j = 0; j < model.input_dim; ++j) {
                acc += A(r, j) * x[j];
            }
            cache.factor_in[r] = acc;
        }
        for (std::size_t i = 0; i < h; ++i) {
            double acc = 0.0;
            for (std::size_t r = 0; r < model.mask.rank; ++r) {
                acc += B(i, r) * cache.factor_in[r];
            }
            z1[i] += acc;
        }
    }
    cache.hidden.resize(h);
    for (std::size_t i = 0; i < h; ++i) {
        cache.hidden[i] = std::tanh(z1[i]);
    }
    cache.hidden_out = cache.hidden;
    if (model.mask.mode == PeftMode::Bottleneck) {
        const Matrix& Wd = P.at("Wd");
        const Matrix& Wu = P.at("Wu");
        const std::size_t hb = model.mask.bottleneck_dim;
        cache.adapter_pre.resize(hb);
        for (std::size_t i = 0; i < hb; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < h; ++j) {
                acc += Wd(i, j) * cache.hidden[j];
            }
            cache.adapter_pre[i] = std::tanh(acc);
        }
        for (std::size_t i = 0; i < h; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < hb; ++j) {
                acc += Wu(i, j) * cache.adapter_pre[j];
            }
            cache.hidden_out[i] += acc;
        }
    }
    cache.logits.resize(C);
    for (std::size_t c = 0; c < C; ++c) {
        double acc = bc.data[c];
        for (std::size_t j = 0; j < h; ++j) {
            acc += Wc(c, j) * cache.hidden_out[j];
        }
        cache.logits[c] = acc;
    }
    return cache;
}

inline double log_sum_exp(std::span<const double> logits) {
    double m = logits[0];
    for (double v : logits) {
        m = std::max(m, v);
    }
    double sum = 0.0;
    for (double v : logits) {
        sum += std::exp(v - m);
    }
    return m + std::log(sum);
}

} // namespace detail

inline std::vector<double> forward(const MlpClassifier& model, std::span<const double> x) {
    return detail::forward_cached(model, x).logits;
}

/// Mean softmax cross-entropy of the selected samples (forward only).
inline double loss(const MlpClassifier& model, const Dataset& ds, std::span<const std::size_t> indices) {
    if (indices.empty()) {
        throw std::invalid_argument("loss: empty batch");
    }
    double total = 0.0;
    for (std::size_t idx : indices) {
        const auto cache = detail::forward_cached(model, ds.features[idx]);
        total += detail::log_sum_exp(cache.logits) - cache.logits[static_cast<std::size_t>(ds.labels[idx])];
    }
    return total / static_cast<double>(indices.size());
}

struct LossAndGrad {
    double loss = 0.0;
    ParamSet grads; // trainable tensors only
};

/// Mean cross-entropy and its analytic gradients for the trainable tensors.
inline LossAndGrad loss_and_grad(const MlpClassifier& model, const Dataset& ds, std::span<const std::size_t> indices) {
    if (indices.empty()) {
        throw std::invalid_argument("loss_and_grad: empty batch");
    }
    const auto& P = model.params.tensors;
    const Matrix& Wc = P.at("Wc");
    const std::size_t h = model.hidden_dim;
    const std::size_t C = model.num_classes;
    const std::size_t d = model.input_dim;
    const auto& trainable = model.params.trainable;

    LossAndGrad out;
    out.grads.trainable = trainable;
    for (const auto& name : trainable) {
        const Matrix& t = P.at(name);
        out.grads.tensors.emplace(name, Matrix(t.rows, t.cols));
    }
    auto grad = [&out](const char* name) -> Matrix& { return out.grads.tensors.at(name); };
    const bool want_W1 = trainable.count("W1") > 0;
    const bool want_b1 = trainable.count("b1") > 0;
    const bool want_Wc = trainable.count("Wc") > 0;
    const bool want_bc = trainable.count("bc") > 0;
    const bool low_rank = model.mask.mode == PeftMode::LowRank;
    const bool bottleneck = model.mask.mode == PeftMode::Bottleneck;

    double total_loss = 0.0;
    std::vector<double> dlogits(C), dhidden_out(h), dhidden(h), dz1(h);
    for (std::size_t idx : indices) {
        const std::span<const double> x = ds.features[idx];
        const auto cache = detail::forward_cached(model, x);
        const std::size_t y = static_cast<std::size_t>(ds.labels[idx]);
        const double lse = detail::log_sum_exp(cache.logits);
        total_loss += lse - cache.logits[y];

        for (std::size_t c = 0; c < C; ++c) {
            dlogits[c] = std::exp(cache.logits[c] - lse);
        }
        dlogits[y] -= 1.0;

        if (want_Wc) {
            Matrix& g = grad("Wc");
            for (std::size_t c = 0; c < C; ++c) {
                for (std::size_t j = 0; j < h; ++j) {
                    g(c, j) += dlogits[c] * cache.hidden_out[j];
                }
            }
        }
        if (want_bc) {
            Matrix& g = grad("bc");
            for (std::size_t c = 0; c < C; ++c) {
                g.data[c] += dlogits[c];
            }
        }
        const bool need_hidden = want_W1 || want_b1 || low_rank || bottleneck;
        if (!need_hidden) {
            continue;
        }
        for (std::size_t j = 0; j < h; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                acc += Wc(c, j) * dlogits[c];
            }
            dhidden_out[j] = acc;
        }
        dhidden = dhidden_out;
        if (bottleneck) {
            const Matrix& Wd = P.at("Wd");
            const Matrix& Wu = P.at("Wu");
            const std::size_t hb = model.mask.bottleneck_dim;
            Matrix& gWu = grad("Wu");
            Matrix& gWd = grad("Wd");
            std::vector<double> dadapter(hb);
            for (std::size_t i = 0; i < hb; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < h; ++j) {
                    acc += Wu(j, i) * dhidden_out[j];
                }
                dadapter[i] = acc * (1.0 - cache.adapter_pre[i] * cache.adapter_pre[i]);
            }
            for (std::size_t j = 0; j < h; ++j) {
                for (std::size_t i = 0; i < hb; ++i) {
                    gWu(j, i) += dhidden_out[j] * cache.adapter_pre[i];
                }
            }
            for (std::size_t i = 0; i < hb; ++i) {
                for (std::size_t j = 0; j < h; ++j) {
                    gWd(i, j) += dadapter[i] * cache.hidden[j];
                }
            }
            for (std::size_t j = 0; j < h; ++j) {
                double acc = 0.0;
                for (std::size_t i = 0; i < hb; ++i) {
                    acc += Wd(i, j) * dadapter[i];
                }
                dhidden[j] = dhidden_out[j] + acc;
            }
        }
        const bool need_z1 = want_W1 || want_b1 || low_rank;
        if (!need_z1) {
            continue;
        }
        for (std::size_t j = 0; j < h; ++j) {
            dz1[j] = dhidden[j] * (1.0 - cache.hidden[j] * cache.hidden[j]);
        }
        if (want_b1) {
            Matrix& g = grad("b1");
            for (std::size_t j = 0; j < h; ++j) {
                g.data[j] += dz1[j];
            }
        }
        if (want_W1) {
            Matrix& g = grad("W1");
            for (std::size_t j = 0; j < h; ++j) {
                for (std::size_t k = 0; k < d; ++k) {
                    g(j, k) += dz1[j] * x[k];
                }
            }
        }
        if (low_rank) {
            const Matrix& B = P.at("B");
            const std::size_t r = model.mask.rank;
            Matrix& gB = grad("B");
            Matrix& gA = grad("A");
            for (std::size_t j = 0; j < h; ++j) {
                for (std::size_t q = 0; q < r; ++q) {
                    gB(j, q) += dz1[j] * cache.factor_in[q];
                }
            }
            for (std::size_t q = 0; q < r; ++q) {
                double acc = 0.0;
                for (std::size_t j = 0; j < h; ++j) {
                    acc += B(j, q) * dz1[j];
                }
                for (std::size_t k = 0; k < d; ++k) {
                    gA(q, k) += acc * x[k];
                }
            }
        }
    }
    const double inv_n = 1.0 / static_cast<double>(indices.size());
    for (auto& [name, g] : out.grads.tensors) {
        for (double& v : g.data) {
            v *= inv_n;
        }
    }
    out.loss = total_loss * inv_n;
    return out;
}

/// One SGD step on the trainable tensors; frozen tensors are copied bit-identical.
inline MlpClassifier sgd_step(const MlpClassifier& model, const ParamSet& grads, double eta) {
    MlpClassifier next = model;
    for (const auto& [name, g] : grads.tensors) {
        if (model.params.trainable.count(name) == 0) {
            throw std::invalid_argument("sgd_step: gradient for frozen tensor " + name);
        }
        Matrix& t = next.params.tensors.at(name);
        require_same_shape(t, g, "sgd_step");
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            t.data[i] -= eta * g.data[i];
        }
    }
    return next;
}

/// Fraction of argmax-correct predictions. Ties break toward the lowest class id.
inline double accuracy(const MlpClassifier& model, const Dataset& ds) {
    if (ds.size() == 0) {
        throw std::invalid_argument("accuracy: empty dataset");
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto logits = forward(model, ds.features[i]);
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.size(); ++c) {
            if (logits[c] > logits[best]) {
                best = c;
            }
        }
        if (best == static_cast<std::size_t>(ds.labels[i])) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

// Checkpoint format: <prefix>.json carries the manifest (dims, mask, tensor shapes
// in name order); <prefix>.bin is the concatenation of each tensor's row-major
// float64 payload, little-endian, in manifest order.
static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

inline void save_checkpoint(const MlpClassifier& model, const std::string& prefix) {
    nlohmann::json manifest;
    manifest["d"] = model.input_dim;
    manifest["h"] = model.hidden_dim;
    manifest["C"] = model.num_classes;
    manifest["mask"] = model.mask.to_string();
    manifest["tensors"] = nlohmann::json::array();
    for (const auto& [name, t] : model.params.tensors) {
        manifest["tensors"].push_back({{"name", name}, {"rows", t.rows}, {"cols", t.cols}});
    }
    std::ofstream meta(prefix + ".json");
    if (!meta) {
        throw std::runtime_error("save_checkpoint: cannot open " + prefix + ".json");
    }
    meta << manifest.dump(2) << '\n';

    std::ofstream bin(prefix + ".bin", std::ios::binary);
    if (!bin) {
        throw std::runtime_error("save_checkpoint: cannot open " + prefix + ".bin");
    }
    for (const auto& [name, t] : model.params.tensors) {
        bin.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
    if (!bin) {
        throw std::runtime_error("save_checkpoint: write failed for " + prefix + ".bin");
    }
}

inline MlpClassifier load_checkpoint(const std::string& prefix) {
    std::ifstream meta(prefix + ".json");
    if (!meta) {
        throw std::runtime_error("load_checkpoint: cannot open " + prefix + ".json");
    }
    nlohmann::json manifest = nlohmann::json::parse(meta);
    MlpClassifier model;
    model.input_dim = manifest.at("d").get<std::size_t>();
    model.hidden_dim = manifest.at("h").get<std::size_t>();
    model.num_classes = manifest.at("C").get<std::size_t>();
    model.mask = PeftMask::parse(manifest.at("mask").get<std::string>());
    model.params.trainable = model.mask.trainable_names();

    std::ifstream bin(prefix + ".bin", std::ios::binary);
    if (!bin) {
        throw std::runtime_error("load_checkpoint: cannot open " + prefix + ".bin");
    }
    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        Matrix t(entry.at("rows").get<std::size_t>(), entry.at("cols").get<std::size_t>());
        bin.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        if (!bin) {
            throw std::runtime_error("load_checkpoint: truncated payload in " + prefix + ".bin");
        }
        model.params.tensors.emplace(name, std::move(t));
    }
    return model;
}

} // namespace fedgnp
