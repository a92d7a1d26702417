#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "panolab/autodiff.hpp"
#include "panolab/checkpoint.hpp"
#include "panolab/common.hpp"
#include "panolab/rng.hpp"

namespace panolab::lora {

/// Hyper-parameters for low-rank adaptation. `targets` holds symbolic matrix
/// groups resolved by the adapted model (attention projections by role plus
/// the text-conditioning / text-encoder projections).
struct AdaptationConfig {
    int rank = 64;
    double alpha = -1.0; // < 0 means alpha = rank, i.e. scale 1
    std::vector<std::string> targets = {"q", "k", "v", "out", "txt_proj"};
    double lr = 1e-3;
    int iterations = 500;
    int batch_size = 8;

    double scale() const { return (alpha < 0.0 ? 1.0 : alpha / rank); }

    void validate() const {
        if (rank < 1) throw ValueError("lora rank must be >= 1");
        if (iterations < 1) throw ValueError("lora iterations must be >= 1");
        if (batch_size < 1) throw ValueError("lora batch size must be >= 1");
    }
};

/// One frozen dense matrix W0 (m x n) with trainable low-rank delta
/// W = W0 + scale * B * A, where B is m x r and A is r x n. Only A and B
/// receive gradients; W0 is stored as plain data and enters the tape as a
/// constant.
class LoraLayer {
public:
    LoraLayer(int m, int n, std::vector<double> w0, int rank, double alpha, const Rng& rng)
        : m_(m), n_(n), w0_(std::move(w0)), rank_(rank),
          scale_(alpha < 0.0 ? 1.0 : alpha / rank) {
        if (m < 1 || n < 1) throw ShapeError("lora base matrix must be non-empty");
        if (w0_.size() != static_cast<std::size_t>(m) * n)
            throw ShapeError("lora base matrix data does not match shape");
        if (rank < 1 || rank > std::min(m, n))
            throw ValueError("lora rank must satisfy 1 <= r <= min(m, n)");
        Rng ra = rng.child("lora.a");
        a_ = ad::Param("lora.a", {rank, n},
                       ra.normal_vec(static_cast<std::size_t>(rank) * n, 0.0, std::sqrt(1.0 / rank)));
        b_ = ad::Param("lora.b", {m, rank}, std::vector<double>(static_cast<std::size_t>(m) * rank, 0.0));
    }

    /// W0*h + scale*B*(A*h); h is [n x k] (or a length-n vector).
    ad::Tensor forward(ad::Tape& tape, const ad::Tensor& h_in) {
        ad::Tensor h = h_in;
        if (h.shape().size() == 1) h = ad::reshape(h, {static_cast<int>(h.size()), 1});
        if (h.rows() != n_) throw ShapeError("lora forward: input rows must equal base columns");
        ad::Tensor w0 = ad::Tensor::constant({m_, n_}, w0_);
        ad::Tensor base = ad::matmul(w0, h);
        ad::Tensor a = tape.leaf(a_);
        ad::Tensor b = tape.leaf(b_);
        return ad::add(base, ad::scale(ad::matmul(b, ad::matmul(a, h)), scale_));
    }

    /// Dense W0 + scale*B*A.
    std::vector<double> merge() const {
        std::vector<double> w(w0_);
        for (int i = 0; i < m_; ++i)
            for (int r = 0; r < rank_; ++r) {
                const double bir = b_.value[static_cast<std::size_t>(i) * rank_ + r];
                if (bir == 0.0) continue;
                for (int j = 0; j < n_; ++j)
                    w[static_cast<std::size_t>(i) * n_ + j] +=
                        scale_ * bir * a_.value[static_cast<std::size_t>(r) * n_ + j];
            }
        return w;
    }

    std::size_t trainable_count() const { return static_cast<std::size_t>(rank_) * (m_ + n_); }

    const std::vector<double>& base() const { return w0_; }
    ad::Param& a() { return a_; }
    ad::Param& b() { return b_; }
    int rank() const { return rank_; }
    double lora_scale() const { return scale_; }
    int rows() const { return m_; }
    int cols() const { return n_; }

private:
    int m_, n_;
    std::vector<double> w0_;
    int rank_;
    double scale_;
    ad::Param a_, b_;
};

/// Trainable low-rank deltas keyed by the base parameter name they adapt.
/// The base ParamStore is never modified; forward passes combine on the fly
/// and `merge_into` emits plain matrices for inference checkpoints.
class AdapterSet {
public:
    struct Adapter {
        ad::Param a; // r x n
        ad::Param b; // m x r
        double scale = 1.0;
        int rank = 1;

        std::size_t trainable_count() const {
            return static_cast<std::size_t>(rank) * (b.shape[0] + a.shape[1]);
        }
    };

    AdapterSet() = default;

    /// Wrap each named base matrix. A ~ N(0, 1/r), B = 0, so the adapted
    /// model starts as an exact no-op over the frozen base.
    static AdapterSet attach(const ParamStore& base, const std::vector<std::string>& param_names,
                             const AdaptationConfig& cfg, const Rng& rng) {
        cfg.validate();
        AdapterSet set;
        for (const auto& name : param_names) {
            if (!base.contains(name)) throw ValueError("lora attach: unknown target parameter " + name);
            const ad::Param& w = base.at(name);
            if (w.shape.size() != 2) throw ValueError("lora attach: target is not a matrix: " + name);
            const int m = w.shape[0], n = w.shape[1];
            if (cfg.rank > std::min(m, n))
                throw ValueError("lora attach: rank exceeds min(m, n) for " + name);
            Adapter a;
            a.rank = cfg.rank;
            a.scale = cfg.scale();
            Rng ra = rng.child("lora." + name + ".a");
            a.a = ad::Param("lora." + name + ".a", {cfg.rank, n},
                            ra.normal_vec(static_cast<std::size_t>(cfg.rank) * n, 0.0,
                                          std::sqrt(1.0 / cfg.rank)));
            a.b = ad::Param("lora." + name + ".b", {m, cfg.rank},
                            std::vector<double>(static_cast<std::size_t>(m) * cfg.rank, 0.0));
            set.adapters_.emplace(name, std::move(a));
        }
        return set;
    }

    bool has(const std::string& base_name) const { return adapters_.count(base_name) > 0; }

    Adapter& at(const std::string& base_name) {
        auto it = adapters_.find(base_name);
        if (it == adapters_.end()) throw ValueError("no adapter for " + base_name);
        return it->second;
    }

    const Adapter& at(const std::string& base_name) const {
        auto it = adapters_.find(base_name);
        if (it == adapters_.end()) throw ValueError("no adapter for " + base_name);
        return it->second;
    }

    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto& [_, a] : adapters_) n += a.trainable_count();
        return n;
    }

    void zero_grads() {
        for (auto& [_, a] : adapters_) {
            a.a.zero_grad();
            a.b.zero_grad();
        }
    }

    void sgd_step(double lr) {
        for (auto& [_, a] : adapters_) {
            ad::sgd_step(a.a, lr);
            ad::sgd_step(a.b, lr);
        }
    }

    /// Fold deltas into a copy of the base weights: W <- W0 + scale*B*A.
    void merge_into(ParamStore& base) const {
        for (const auto& [name, ad_] : adapters_) {
            ad::Param& w = base.at(name);
            const int m = w.shape[0], n = w.shape[1], r = ad_.rank;
            for (int i = 0; i < m; ++i)
                for (int k = 0; k < r; ++k) {
                    const double bik = ad_.b.value[static_cast<std::size_t>(i) * r + k];
                    if (bik == 0.0) continue;
                    for (int j = 0; j < n; ++j)
                        w.value[static_cast<std::size_t>(i) * n + j] +=
                            ad_.scale * bik * ad_.a.value[static_cast<std::size_t>(k) * n + j];
                }
        }
    }

    /// Serialize as a PGPP store with "lora." prefixed names.
    ParamStore to_store() const {
        ParamStore store;
        for (const auto& [name, a] : adapters_) {
            store.add("lora." + name + ".a", a.a.shape, a.a.value);
            store.add("lora." + name + ".b", a.b.shape, a.b.value);
            store.add("lora." + name + ".scale", {1}, {a.scale});
        }
        return store;
    }

    static AdapterSet from_store(const ParamStore& store) {
        AdapterSet set;
        for (const auto& [name, p] : store) {
            if (name.rfind("lora.", 0) != 0) throw FormatError("adapter store: unexpected name " + name);
            if (name.size() > 2 && name.substr(name.size() - 2) == ".a") {
                const std::string base_name = name.substr(5, name.size() - 7);
                Adapter a;
                a.a = ad::Param(name, p.shape, p.value);
                const auto& b = store.at("lora." + base_name + ".b");
                a.b = ad::Param(b.name, b.shape, b.value);
                a.scale = store.at("lora." + base_name + ".scale").value[0];
                a.rank = p.shape[0];
                if (a.b.shape[1] != a.rank) throw FormatError("adapter store: rank mismatch for " + base_name);
                set.adapters_.emplace(base_name, std::move(a));
            }
        }
        return set;
    }

    auto begin() { return adapters_.begin(); }
    auto end() { return adapters_.end(); }
    auto begin() const { return adapters_.begin(); }
    auto end() const { return adapters_.end(); }
    std::size_t count() const { return adapters_.size(); }

private:
    std::map<std::string, Adapter> adapters_;
};

/// y = x * (W0 + scale*B*A) for row-vector activations x [p x m].
/// The base weight enters as a tracked leaf only when `train_base` is set;
/// otherwise it is a constant and backward never touches it.
inline ad::Tensor adapted_matmul(ad::Tape& tape, const ad::Tensor& x, ad::Param& w,
                                 AdapterSet* adapters, bool train_base) {
    ad::Tensor wt = train_base ? tape.leaf(w) : ad::Tensor::constant(w.shape, w.value);
    ad::Tensor y = ad::matmul(x, wt);
    if (adapters != nullptr && adapters->has(w.name)) {
        auto& a = adapters->at(w.name);
        ad::Tensor bt = tape.leaf(a.b);
        ad::Tensor at = tape.leaf(a.a);
        y = ad::add(y, ad::scale(ad::matmul(ad::matmul(x, bt), at), a.scale));
    }
    return y;
}

} // namespace panolab::lora
