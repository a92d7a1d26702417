#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "panolab/autodiff.hpp"
#include "panolab/checkpoint.hpp"
#include "panolab/common.hpp"
#include "panolab/lora.hpp"
#include "panolab/rng.hpp"

namespace panolab::diffusion {

/// Per-step variance controls of the forward process. beta is linear between
/// its endpoints; alpha = 1 - beta; alpha_bar is the running product.
struct NoiseSchedule {
    int steps = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;

    void validate() const {
        if (steps < 1 || static_cast<int>(beta.size()) != steps) throw ValueError("bad schedule length");
        double prod = 1.0;
        for (int t = 0; t < steps; ++t) {
            if (!(beta[t] > 0.0 && beta[t] < 1.0)) throw ValueError("beta out of (0,1)");
            if (std::abs(alpha[t] - (1.0 - beta[t])) > 1e-15) throw ValueError("alpha != 1 - beta");
            prod *= alpha[t];
            if (std::abs(alpha_bar[t] - prod) > 1e-12) throw ValueError("alpha_bar product identity violated");
            if (t > 0 && !(alpha_bar[t] < alpha_bar[t - 1]))
                throw ValueError("alpha_bar must be strictly decreasing");
        }
        if (!(alpha_bar[steps - 1] > 0.0 && alpha_bar[0] < 1.0))
            throw ValueError("alpha_bar out of range");
    }
};

inline NoiseSchedule make_schedule(int t_steps, double beta_start = 1e-4, double beta_end = 0.02) {
    if (t_steps < 1) throw ValueError("schedule needs at least one step");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw ValueError("require 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.steps = t_steps;
    s.beta.resize(t_steps);
    s.alpha.resize(t_steps);
    s.alpha_bar.resize(t_steps);
    double prod = 1.0;
    for (int t = 0; t < t_steps; ++t) {
        const double frac = (t_steps == 1) ? 0.0 : static_cast<double>(t) / (t_steps - 1);
        s.beta[t] = beta_start + (beta_end - beta_start) * frac;
        s.alpha[t] = 1.0 - s.beta[t];
        prod *= s.alpha[t];
        s.alpha_bar[t] = prod;
    }
    s.validate();
    return s;
}

/// Identity latent codec: the latent space is the pixel grid itself.
struct LatentCodec {
    std::vector<double> encode(const std::vector<double>& x) const { return x; }
    std::vector<double> decode(const std::vector<double>& z) const { return z; }
};

struct NoisedSample {
    std::vector<double> z_t;
    int t = 0;
    std::vector<double> eps;
};

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
inline NoisedSample forward_noise(const std::vector<double>& z0, int t, std::vector<double> eps,
                                  const NoiseSchedule& s) {
    if (t < 0 || t >= s.steps) throw ValueError("forward_noise: step out of range");
    if (eps.size() != z0.size()) throw ShapeError("forward_noise: eps shape mismatch");
    const double a = std::sqrt(s.alpha_bar[static_cast<std::size_t>(t)]);
    const double b = std::sqrt(1.0 - s.alpha_bar[static_cast<std::size_t>(t)]);
    NoisedSample out;
    out.t = t;
    out.z_t.resize(z0.size());
    for (std::size_t i = 0; i < z0.size(); ++i) out.z_t[i] = a * z0[i] + b * eps[i];
    out.eps = std::move(eps);
    return out;
}

// ---------------------------------------------------------------------------
// Denoiser
// ---------------------------------------------------------------------------

/// Epsilon-predictor over one generation window: rows of the window are
/// embedded as a token sequence and run through residual attention +
/// feed-forward blocks with learned time embeddings and a text-conditioning
/// projection added to every block input.
struct DenoiserConfig {
    int channels = 1;
    int window_h = 8;
    int window_w = 8;
    int width = 32;   // model dim
    int blocks = 2;
    int cond_dim = 16;
    int t_steps = 100;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    int patch_count() const { return window_h; }
    int patch_dim() const { return window_w * channels; }
    std::size_t latent_size() const {
        return static_cast<std::size_t>(channels) * window_h * window_w;
    }

    void validate() const {
        if (channels < 1 || window_h < 1 || window_w < 1) throw ValueError("bad window dims");
        if (width < 1 || blocks < 1 || cond_dim < 1 || t_steps < 1) throw ValueError("bad denoiser config");
        if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
            throw ValueError("bad beta range");
    }
};

class DenoiserModel {
public:
    DenoiserModel(DenoiserConfig cfg, const Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        const int d = cfg_.width;
        const int pd = cfg_.patch_dim();
        params_.add_normal("embed", {pd, d}, rng, 1.0 / std::sqrt(pd));
        params_.add_normal("time_emb", {cfg_.t_steps, d}, rng, 0.1);
        params_.add_normal("txt_proj", {cfg_.cond_dim, d}, rng, 1.0 / std::sqrt(cfg_.cond_dim));
        for (int i = 0; i < cfg_.blocks; ++i) {
            const std::string p = "block" + std::to_string(i);
            params_.add_normal(p + ".attn.q", {d, d}, rng, 1.0 / std::sqrt(d));
            params_.add_normal(p + ".attn.k", {d, d}, rng, 1.0 / std::sqrt(d));
            params_.add_normal(p + ".attn.v", {d, d}, rng, 1.0 / std::sqrt(d));
            params_.add_normal(p + ".attn.out", {d, d}, rng, 1.0 / std::sqrt(d));
            params_.add_normal(p + ".ff.w1", {d, 2 * d}, rng, 1.0 / std::sqrt(d));
            params_.add_normal(p + ".ff.w2", {2 * d, d}, rng, 1.0 / std::sqrt(2 * d));
        }
        params_.add_normal("unembed", {d, pd}, rng, 1.0 / std::sqrt(d));
    }

    const DenoiserConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    NoiseSchedule schedule() const { return make_schedule(cfg_.t_steps, cfg_.beta_start, cfg_.beta_end); }

    /// Epsilon prediction. z_t is any tensor whose size equals the window
    /// latent size; the output has z_t's shape.
    ad::Tensor forward(ad::Tape& tape, const ad::Tensor& z_t, const ad::Tensor& cond, int t,
                       lora::AdapterSet* adapters = nullptr, bool train_base = false) {
        if (z_t.size() != cfg_.latent_size()) throw ShapeError("denoiser: latent size mismatch");
        if (cond.size() != static_cast<std::size_t>(cfg_.cond_dim))
            throw ShapeError("denoiser: conditioning size mismatch");
        if (t < 0 || t >= cfg_.t_steps) throw ValueError("denoiser: time step out of range");

        const int p = cfg_.patch_count(), pd = cfg_.patch_dim(), d = cfg_.width;
        ad::Tensor x = ad::reshape(z_t, {p, pd});
        ad::Tensor cond_row = ad::reshape(cond, {1, cfg_.cond_dim});

        ad::Tensor h = ad::matmul(x, weight(tape, "embed", train_base));
        ad::Tensor temb = ad::gather_rows(weight(tape, "time_emb", train_base), {t});
        ad::Tensor cemb = lora::adapted_matmul(tape, cond_row, params_.at("txt_proj"), adapters, train_base);
        ad::Tensor bias = ad::broadcast_rows(ad::add(temb, cemb), p);

        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
        for (int i = 0; i < cfg_.blocks; ++i) {
            const std::string pre = "block" + std::to_string(i);
            ad::Tensor xin = ad::add(h, bias);
            ad::Tensor q = lora::adapted_matmul(tape, xin, params_.at(pre + ".attn.q"), adapters, train_base);
            ad::Tensor k = lora::adapted_matmul(tape, xin, params_.at(pre + ".attn.k"), adapters, train_base);
            ad::Tensor v = lora::adapted_matmul(tape, xin, params_.at(pre + ".attn.v"), adapters, train_base);
            ad::Tensor attn = ad::softmax_rows(ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt_d));
            ad::Tensor o =
                lora::adapted_matmul(tape, ad::matmul(attn, v), params_.at(pre + ".attn.out"), adapters, train_base);
            h = ad::add(h, o);
            ad::Tensor f =
                ad::matmul(ad::gelu(ad::matmul(h, weight(tape, pre + ".ff.w1", train_base))),
                           weight(tape, pre + ".ff.w2", train_base));
            h = ad::add(h, f);
        }
        return ad::reshape(ad::matmul(h, weight(tape, "unembed", train_base)), z_t.shape());
    }

    /// Value-only prediction used by the samplers.
    std::vector<double> predict(const std::vector<double>& z_t, const std::vector<double>& cond, int t,
                                lora::AdapterSet* adapters = nullptr) {
        ad::Tape tape;
        ad::Tensor z = ad::Tensor::constant({static_cast<int>(z_t.size())}, z_t);
        ad::Tensor c = ad::Tensor::constant({static_cast<int>(cond.size())}, cond);
        // Adapter params enter as leaves, but nothing calls backward here.
        return forward(tape, z, c, t, adapters, false).data();
    }

    /// Concrete names of the attention projection matrices, by role.
    std::vector<std::string> target_names(const std::string& role) const {
        std::vector<std::string> names;
        if (role == "q" || role == "k" || role == "v" || role == "out") {
            for (int i = 0; i < cfg_.blocks; ++i)
                names.push_back("block" + std::to_string(i) + ".attn." + role);
        } else if (role == "txt_proj") {
            names.push_back("txt_proj");
        } else {
            throw ValueError("unknown lora target role: " + role);
        }
        return names;
    }

    ParamStore to_store() const {
        ParamStore store;
        for (const auto& [name, p] : params_) store.add(name, p.shape, p.value);
        store.add("meta.beta_end", {1}, {cfg_.beta_end});
        store.add("meta.beta_start", {1}, {cfg_.beta_start});
        store.add("meta.blocks", {1}, {static_cast<double>(cfg_.blocks)});
        store.add("meta.channels", {1}, {static_cast<double>(cfg_.channels)});
        store.add("meta.cond_dim", {1}, {static_cast<double>(cfg_.cond_dim)});
        store.add("meta.t_steps", {1}, {static_cast<double>(cfg_.t_steps)});
        store.add("meta.width", {1}, {static_cast<double>(cfg_.width)});
        store.add("meta.window_h", {1}, {static_cast<double>(cfg_.window_h)});
        store.add("meta.window_w", {1}, {static_cast<double>(cfg_.window_w)});
        return store;
    }

    static DenoiserModel from_store(const ParamStore& store) {
        DenoiserConfig cfg;
        cfg.beta_end = store.at("meta.beta_end").value[0];
        cfg.beta_start = store.at("meta.beta_start").value[0];
        cfg.blocks = static_cast<int>(store.at("meta.blocks").value[0]);
        cfg.channels = static_cast<int>(store.at("meta.channels").value[0]);
        cfg.cond_dim = static_cast<int>(store.at("meta.cond_dim").value[0]);
        cfg.t_steps = static_cast<int>(store.at("meta.t_steps").value[0]);
        cfg.width = static_cast<int>(store.at("meta.width").value[0]);
        cfg.window_h = static_cast<int>(store.at("meta.window_h").value[0]);
        cfg.window_w = static_cast<int>(store.at("meta.window_w").value[0]);
        DenoiserModel model(cfg, Rng(0));
        for (auto& [name, p] : model.params_) {
            const ad::Param& src = store.at(name);
            if (src.shape != p.shape) throw FormatError("checkpoint shape mismatch: " + name);
            p.value = src.value;
        }
        return model;
    }

private:
    ad::Tensor weight(ad::Tape& tape, const std::string& name, bool train_base) {
        ad::Param& p = params_.at(name);
        return train_base ? tape.leaf(p) : ad::Tensor::constant(p.shape, p.value);
    }

    DenoiserConfig cfg_;
    ParamStore params_;
};

// ---------------------------------------------------------------------------
// Training objective
// ---------------------------------------------------------------------------

struct BatchItem {
    std::vector<double> image; // pixel-space sample, encoded by the codec
    ad::Tensor cond;           // caption embedding (may be on the tape)
};

/// Mean over the batch of per-sample MSE between the drawn noise and the
/// model prediction. Per item the stream draws the step t first, then eps.
template <class PredictFn>
ad::Tensor denoise_loss_with(ad::Tape& tape, PredictFn&& predict, const LatentCodec& codec,
                             const std::vector<BatchItem>& batch, const NoiseSchedule& sched, Rng& rng) {
    if (batch.empty()) throw ValueError("denoise_loss: empty batch");
    ad::Tensor total = ad::Tensor::scalar(0.0);
    for (const auto& item : batch) {
        const std::vector<double> z0 = codec.encode(item.image);
        const int t = rng.below_int(sched.steps);
        NoisedSample ns = forward_noise(z0, t, rng.normal_vec(z0.size()), sched);
        ad::Tensor z_t = ad::Tensor::constant({static_cast<int>(ns.z_t.size())}, ns.z_t);
        ad::Tensor eps = ad::Tensor::constant({static_cast<int>(ns.eps.size())}, ns.eps);
        ad::Tensor pred = predict(tape, z_t, item.cond, t);
        total = ad::add(total, ad::mse(eps, pred));
    }
    return ad::scale(total, 1.0 / static_cast<double>(batch.size()));
}

inline ad::Tensor denoise_loss(ad::Tape& tape, DenoiserModel& model, const LatentCodec& codec,
                               const std::vector<BatchItem>& batch, const NoiseSchedule& sched, Rng& rng,
                               lora::AdapterSet* adapters = nullptr, bool train_base = false) {
    return denoise_loss_with(
        tape,
        [&](ad::Tape& tp, const ad::Tensor& z_t, const ad::Tensor& cond, int t) {
            return model.forward(tp, z_t, cond, t, adapters, train_base);
        },
        codec, batch, sched, rng);
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// DDPM ancestral sampling. predict(z, t) returns the epsilon estimate;
/// sigma_t = sqrt(beta_t) and no noise is added at t = 0.
template <class PredictFn>
std::vector<double> sample_with(PredictFn&& predict, const NoiseSchedule& sched, std::size_t n, Rng& rng) {
    std::vector<double> z = rng.normal_vec(n);
    for (int t = sched.steps - 1; t >= 0; --t) {
        const std::vector<double> eps_hat = predict(z, t);
        if (eps_hat.size() != n) throw ShapeError("sampler: prediction size mismatch");
        const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha[static_cast<std::size_t>(t)]);
        const double coef = sched.beta[static_cast<std::size_t>(t)] /
                            std::sqrt(1.0 - sched.alpha_bar[static_cast<std::size_t>(t)]);
        for (std::size_t i = 0; i < n; ++i) z[i] = inv_sqrt_alpha * (z[i] - coef * eps_hat[i]);
        if (t > 0) {
            const double sigma = std::sqrt(sched.beta[static_cast<std::size_t>(t)]);
            for (std::size_t i = 0; i < n; ++i) z[i] += sigma * rng.normal();
        }
        ad::check_finite(z, "sample step");
    }
    return z;
}

template <class Model>
std::vector<double> sample(Model& model, const NoiseSchedule& sched, std::size_t n,
                           const std::vector<double>& cond, Rng& rng,
                           lora::AdapterSet* adapters = nullptr) {
    if (n != model.config().latent_size()) throw ShapeError("sample: shape must match model window");
    return sample_with([&](const std::vector<double>& z, int t) { return model.predict(z, cond, t, adapters); },
                       sched, n, rng);
}

/// Mask-conditioned sampling: mask=1 marks pixels to generate, mask=0 pixels
/// to keep. At every reverse step the known region is re-imposed from a fresh
/// forward-noising of the source at the step's noise level; the final output
/// carries the source exactly on the known region.
///
/// Degenerate masks keep the stream contract simple: an all-zero mask returns
/// the source without consuming randomness, and an all-one mask consumes
/// exactly the same stream as `sample_with`.
template <class PredictFn>
std::vector<double> inpaint_sample_with(PredictFn&& predict, const NoiseSchedule& sched,
                                        const std::vector<double>& source, const std::vector<std::uint8_t>& mask,
                                        Rng& rng) {
    const std::size_t n = source.size();
    if (mask.size() != n) throw ShapeError("inpaint: mask shape mismatch");
    bool any_known = false, any_unknown = false;
    for (std::uint8_t m : mask) {
        if (m == 0)
            any_known = true;
        else if (m == 1)
            any_unknown = true;
        else
            throw ValueError("inpaint: mask must be binary");
    }
    if (!any_unknown) return source;

    std::vector<double> z = rng.normal_vec(n);
    for (int t = sched.steps - 1; t >= 0; --t) {
        const std::vector<double> eps_hat = predict(z, t);
        if (eps_hat.size() != n) throw ShapeError("sampler: prediction size mismatch");
        const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha[static_cast<std::size_t>(t)]);
        const double coef = sched.beta[static_cast<std::size_t>(t)] /
                            std::sqrt(1.0 - sched.alpha_bar[static_cast<std::size_t>(t)]);
        for (std::size_t i = 0; i < n; ++i) z[i] = inv_sqrt_alpha * (z[i] - coef * eps_hat[i]);
        if (t > 0) {
            const double sigma = std::sqrt(sched.beta[static_cast<std::size_t>(t)]);
            for (std::size_t i = 0; i < n; ++i) z[i] += sigma * rng.normal();
        }
        if (any_known) {
            if (t > 0) {
                NoisedSample known = forward_noise(source, t - 1, rng.normal_vec(n), sched);
                for (std::size_t i = 0; i < n; ++i)
                    if (mask[i] == 0) z[i] = known.z_t[i];
            } else {
                for (std::size_t i = 0; i < n; ++i)
                    if (mask[i] == 0) z[i] = source[i];
            }
        }
        ad::check_finite(z, "inpaint step");
    }
    return z;
}

template <class Model>
std::vector<double> inpaint_sample(Model& model, const NoiseSchedule& sched,
                                   const std::vector<double>& source,
                                   const std::vector<std::uint8_t>& mask,
                                   const std::vector<double>& cond, Rng& rng,
                                   lora::AdapterSet* adapters = nullptr) {
    if (source.size() != model.config().latent_size())
        throw ShapeError("inpaint: source must match model window");
    return inpaint_sample_with(
        [&](const std::vector<double>& z, int t) { return model.predict(z, cond, t, adapters); }, sched,
        source, mask, rng);
}

} // namespace panolab::diffusion
