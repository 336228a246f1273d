#pragma once

#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "voxcvae/rng.hpp"
#include "voxcvae/tensor.hpp"

namespace voxcvae {

enum class ReconLoss { Bce, Mse };
enum class Profile { Full, Tiny };

inline std::string to_string(ReconLoss r) { return r == ReconLoss::Bce ? "bce" : "mse"; }
inline std::string to_string(Profile p) { return p == Profile::Full ? "full" : "tiny"; }

inline ReconLoss recon_loss_from_string(const std::string& s) {
    if (s == "bce") return ReconLoss::Bce;
    if (s == "mse") return ReconLoss::Mse;
    throw std::invalid_argument("unknown reconstruction loss '" + s + "' (expected bce|mse)");
}

inline Profile profile_from_string(const std::string& s) {
    if (s == "full") return Profile::Full;
    if (s == "tiny") return Profile::Tiny;
    throw std::invalid_argument("unknown profile '" + s + "' (expected full|tiny)");
}

// Layer plan for the voxel CVAE. The full profile is the reference network;
// the tiny profile divides all channel counts by 8 and the voxel extent by
// 2 while keeping the layer count, for fast CPU experiments.
struct ModelConfig {
    Profile profile = Profile::Full;
    int voxel_extent = 32;
    int latent_dim = 32;
    int cond_image_extent = 128;
    int cond_channels = 4;
    int cond_slab_depth = 4;
    std::vector<int> encoder_channels = {8, 64, 128, 256};
    std::vector<int> encoder_dense = {256, 128, 512};
    std::vector<int> decoder_channels = {256, 128, 16, 8, 1};
    int decoder_dense = 256;
    float alpha = 0.1f;
    float dropout_rate = 0.2f;
    ReconLoss recon_loss = ReconLoss::Bce;
    float kl_weight = 1.0f;

    static ModelConfig full() { return ModelConfig{}; }

    static ModelConfig tiny() {
        ModelConfig c;
        c.profile = Profile::Tiny;
        c.voxel_extent = 16;
        for (int& ch : c.encoder_channels) ch = std::max(1, ch / 8);
        for (int& ch : c.encoder_dense) ch = std::max(1, ch / 8);
        for (int& ch : c.decoder_channels) ch = std::max(1, ch / 8);
        c.decoder_dense = std::max(1, c.decoder_dense / 8);
        return c;
    }

    static ModelConfig for_profile(Profile p) {
        return p == Profile::Full ? full() : tiny();
    }

    int cond_vector_dim() const { return voxel_extent * voxel_extent * cond_slab_depth; }
    int bottleneck_extent() const { return voxel_extent / 8; }
    int bottleneck_channels() const {
        int cube = bottleneck_extent() * bottleneck_extent() * bottleneck_extent();
        return decoder_dense / cube;
    }
    // number of stride-2 reductions taking the image down to the slab extent
    int embed_reductions() const {
        int r = 0;
        for (int e = cond_image_extent; e > voxel_extent; e /= 2) ++r;
        return r;
    }

    void validate() const {
        if (latent_dim <= 0) throw std::invalid_argument("config: latent_dim must be positive");
        if (voxel_extent % 8 != 0)
            throw std::invalid_argument("config: voxel_extent must be divisible by 8");
        if (encoder_channels.size() != 4 || encoder_dense.size() != 3 ||
            decoder_channels.size() != 5)
            throw std::invalid_argument("config: layer plans must have 4/3/5 entries");
        int e = cond_image_extent;
        while (e > voxel_extent && e % 2 == 0) e /= 2;
        if (e != voxel_extent)
            throw std::invalid_argument(
                "config: cond_image_extent must be voxel_extent times a power of 2");
        int cube = bottleneck_extent() * bottleneck_extent() * bottleneck_extent();
        if (decoder_dense % cube != 0)
            throw std::invalid_argument("config: decoder_dense must factor over a " +
                                        std::to_string(bottleneck_extent()) + "^3 bottleneck");
        if (!(dropout_rate >= 0.f && dropout_rate < 1.f))
            throw std::invalid_argument("config: dropout_rate must lie in [0,1)");
        if (kl_weight < 0.f) throw std::invalid_argument("config: kl_weight must be >= 0");
    }

    std::string to_text() const;
    static ModelConfig from_text(const std::string& text);

    bool operator==(const ModelConfig&) const = default;
};

namespace detail {

inline std::string fmt_float(float v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", double(v));
    return buf;
}

inline std::string fmt_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

inline std::vector<int> parse_ints(const std::string& s) {
    std::vector<int> out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ',')) out.push_back(std::stoi(tok));
    return out;
}

}  // namespace detail

inline std::string ModelConfig::to_text() const {
    std::ostringstream os;
    os << "profile=" << to_string(profile) << '\n'
       << "voxel_extent=" << voxel_extent << '\n'
       << "latent_dim=" << latent_dim << '\n'
       << "cond_image_extent=" << cond_image_extent << '\n'
       << "cond_channels=" << cond_channels << '\n'
       << "cond_slab_depth=" << cond_slab_depth << '\n'
       << "encoder_channels=" << detail::fmt_ints(encoder_channels) << '\n'
       << "encoder_dense=" << detail::fmt_ints(encoder_dense) << '\n'
       << "decoder_channels=" << detail::fmt_ints(decoder_channels) << '\n'
       << "decoder_dense=" << decoder_dense << '\n'
       << "alpha=" << detail::fmt_float(alpha) << '\n'
       << "dropout_rate=" << detail::fmt_float(dropout_rate) << '\n'
       << "recon_loss=" << to_string(recon_loss) << '\n'
       << "kl_weight=" << detail::fmt_float(kl_weight) << '\n';
    return os.str();
}

inline ModelConfig ModelConfig::from_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: malformed line '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto take = [&](const char* key) {
        auto it = kv.find(key);
        if (it == kv.end())
            throw std::invalid_argument(std::string("config: missing key '") + key + "'");
        std::string v = it->second;
        kv.erase(it);
        return v;
    };
    ModelConfig c;
    c.profile = profile_from_string(take("profile"));
    c.voxel_extent = std::stoi(take("voxel_extent"));
    c.latent_dim = std::stoi(take("latent_dim"));
    c.cond_image_extent = std::stoi(take("cond_image_extent"));
    c.cond_channels = std::stoi(take("cond_channels"));
    c.cond_slab_depth = std::stoi(take("cond_slab_depth"));
    c.encoder_channels = detail::parse_ints(take("encoder_channels"));
    c.encoder_dense = detail::parse_ints(take("encoder_dense"));
    c.decoder_channels = detail::parse_ints(take("decoder_channels"));
    c.decoder_dense = std::stoi(take("decoder_dense"));
    c.alpha = std::stof(take("alpha"));
    c.dropout_rate = std::stof(take("dropout_rate"));
    c.recon_loss = recon_loss_from_string(take("recon_loss"));
    c.kl_weight = std::stof(take("kl_weight"));
    if (!kv.empty())
        throw std::invalid_argument("config: unknown key '" + kv.begin()->first + "'");
    c.validate();
    return c;
}

// Execution mode for a model forward pass.
struct ForwardMode {
    bool train = false;
    bool update_stats = false;  // fold batch statistics into the running stats
    Rng* dropout_rng = nullptr; // required when train and dropout_rate > 0

    static ForwardMode eval() { return ForwardMode{}; }
    static ForwardMode training(Rng& dropout) { return ForwardMode{true, true, &dropout}; }
    // batch statistics without side effects, for gradient-check probes
    static ForwardMode frozen_train() { return ForwardMode{true, false, nullptr}; }
};

// l = mu + exp(log_var / 2) * eps, differentiable in mu and log_var.
template <class T>
TensorT<T> reparameterize(const TensorT<T>& mu, const TensorT<T>& log_var,
                          const TensorT<T>& eps) {
    return add(mu, mul(exp(mul(log_var, T(0.5))), eps));
}

// D(N(mu, diag exp(log_var)) || N(0,I)) = 0.5 * sum(mu^2 + exp(lv) - 1 - lv),
// averaged over the batch when the inputs are [B, latent].
template <class T>
TensorT<T> kl_divergence(const TensorT<T>& mu, const TensorT<T>& log_var) {
    detail::check_same_shape("kl_divergence", mu, log_var);
    std::size_t batch = mu.rank() == 2 ? std::size_t(mu.extent(0)) : 1;
    TensorT<T> per_dim = sub(add(square(mu), exp(log_var)), add(log_var, T(1)));
    return mul(sum(per_dim), T(0.5) / T(batch));
}

template <class T>
struct LossPartsT {
    TensorT<T> total;  // recon + kl_weight * kl
    TensorT<T> recon;
    TensorT<T> kl;
};

// Negative evidence lower bound: reconstruction term plus weighted KL.
template <class T>
LossPartsT<T> elbo_loss(const TensorT<T>& logits, const TensorT<T>& target, const TensorT<T>& mu,
                        const TensorT<T>& log_var, T kl_weight, ReconLoss recon_mode) {
    detail::check_same_shape("elbo_loss", logits, target);
    TensorT<T> recon;
    if (recon_mode == ReconLoss::Bce) {
        recon = bce_with_logits_mean(logits, target);
    } else {
        recon = mean(square(sub(sigmoid(logits), target)));
    }
    TensorT<T> kl = kl_divergence(mu, log_var);
    TensorT<T> total = add(recon, mul(kl, kl_weight));
    return {total, recon, kl};
}

// Max pooling that first pads odd spatial extents with the lowest value, so
// the padding can never win a window.
template <class T>
TensorT<T> maxpool3d_padded(TensorT<T> x) {
    int base = x.rank() == 5 ? 1 : 0;
    for (int a = 0; a < 3; ++a)
        if (x.extent(base + a) % 2)
            x = pad_end(x, base + a, 1, std::numeric_limits<T>::lowest());
    return maxpool3d(x);
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

template <class T>
struct NamedTensorRef {
    std::string name;
    TensorT<T>* tensor;
};

template <class T>
struct DenseLayer {
    TensorT<T> weight, bias;

    DenseLayer() = default;
    DenseLayer(int in, int out) : weight({in, out}), bias({out}) {
        weight.set_requires_grad(true);
        bias.set_requires_grad(true);
    }

    void init(Rng& rng) {
        fill_fan_uniform(weight, rng, std::size_t(weight.extent(0)),
                         std::size_t(weight.extent(1)));
    }

    TensorT<T> forward(const TensorT<T>& x) const { return dense(x, weight, bias); }

    void collect(const std::string& prefix, std::vector<NamedTensorRef<T>>& out) {
        out.push_back({prefix + ".weight", &weight});
        out.push_back({prefix + ".bias", &bias});
    }
};

template <class T>
struct Conv3dLayer {
    TensorT<T> kernel, bias;

    Conv3dLayer() = default;
    Conv3dLayer(int ci, int co) : kernel({3, 3, 3, ci, co}), bias({co}) {
        kernel.set_requires_grad(true);
        bias.set_requires_grad(true);
    }

    void init(Rng& rng) {
        std::size_t fan_in = 27u * std::size_t(kernel.extent(3));
        std::size_t fan_out = 27u * std::size_t(kernel.extent(4));
        fill_fan_uniform(kernel, rng, fan_in, fan_out);
    }

    TensorT<T> forward(const TensorT<T>& x) const { return conv3d_same(x, kernel, bias); }

    void collect(const std::string& prefix, std::vector<NamedTensorRef<T>>& out) {
        out.push_back({prefix + ".kernel", &kernel});
        out.push_back({prefix + ".bias", &bias});
    }
};

template <class T>
struct Conv2dLayer {
    TensorT<T> kernel, bias;
    int stride = 1;

    Conv2dLayer() = default;
    Conv2dLayer(int kh, int kw, int ci, int co, int stride_)
        : kernel({kh, kw, ci, co}), bias({co}), stride(stride_) {
        kernel.set_requires_grad(true);
        bias.set_requires_grad(true);
    }

    void init(Rng& rng) {
        std::size_t taps = std::size_t(kernel.extent(0)) * std::size_t(kernel.extent(1));
        fill_fan_uniform(kernel, rng, taps * std::size_t(kernel.extent(2)),
                         taps * std::size_t(kernel.extent(3)));
    }

    TensorT<T> forward(const TensorT<T>& x) const { return conv2d_same(x, kernel, bias, stride); }

    void collect(const std::string& prefix, std::vector<NamedTensorRef<T>>& out) {
        out.push_back({prefix + ".kernel", &kernel});
        out.push_back({prefix + ".bias", &bias});
    }
};

template <class T>
struct BatchNormLayer {
    TensorT<T> gamma, beta, running_mean, running_var;

    BatchNormLayer() = default;
    explicit BatchNormLayer(int channels)
        : gamma(TensorT<T>::full({channels}, T(1))),
          beta({channels}),
          running_mean({channels}),
          running_var(TensorT<T>::full({channels}, T(1))) {
        gamma.set_requires_grad(true);
        beta.set_requires_grad(true);
    }

    TensorT<T> forward(const TensorT<T>& x, const ForwardMode& mode) {
        BatchNormOpts opts;
        opts.train = mode.train;
        opts.update_stats = mode.train && mode.update_stats;
        return batchnorm(x, gamma, beta, running_mean, running_var, opts);
    }

    void collect(const std::string& prefix, std::vector<NamedTensorRef<T>>& out) {
        out.push_back({prefix + ".gamma", &gamma});
        out.push_back({prefix + ".beta", &beta});
    }

    void collect_stats(const std::string& prefix, std::vector<NamedTensorRef<T>>& out) {
        out.push_back({prefix + ".running_mean", &running_mean});
        out.push_back({prefix + ".running_var", &running_var});
    }
};

// ---------------------------------------------------------------------------
// the conditional VAE
// ---------------------------------------------------------------------------

template <class T>
struct ConditionEmbeddingT {
    TensorT<T> slab;    // [B, e, e, slab_depth, 1], concatenated with voxels
    TensorT<T> vector;  // [B, e*e*slab_depth], row-major flattening of slab
};

// Encoder/decoder pair for voxel reconstruction from a single posed image.
// The condition image feeds both halves: as a learned slab stacked onto the
// voxel volume on the encoder side and as a flat vector joined with the
// latent code on the decoder side.
template <class T>
class CvaeT {
public:
    ModelConfig cfg;

    CvaeT() : CvaeT(ModelConfig::full()) {}

    explicit CvaeT(ModelConfig config) : cfg(std::move(config)) {
        cfg.validate();
        int hidden = cfg.encoder_channels[0];
        int reductions = cfg.embed_reductions();
        int ci = cfg.cond_channels;
        for (int r = 0; r < reductions; ++r) {
            embed_convs_.emplace_back(3, 3, ci, hidden, 2);
            ci = hidden;
        }
        embed_proj_ = Conv2dLayer<T>(1, 1, ci, cfg.cond_slab_depth, 1);

        enc_convs_.emplace_back(1, cfg.encoder_channels[0]);
        enc_convs_.emplace_back(cfg.encoder_channels[0], cfg.encoder_channels[1]);
        enc_convs_.emplace_back(cfg.encoder_channels[1], cfg.encoder_channels[2]);
        enc_convs_.emplace_back(cfg.encoder_channels[2], cfg.encoder_channels[3]);
        enc_bn1_ = BatchNormLayer<T>(cfg.encoder_channels[1]);
        enc_bn2_ = BatchNormLayer<T>(cfg.encoder_channels[2]);

        enc_fc0_ = DenseLayer<T>(flatten_dim(), cfg.encoder_dense[0]);
        enc_bn_fc_ = BatchNormLayer<T>(cfg.encoder_dense[0]);
        enc_fc1_ = DenseLayer<T>(cfg.encoder_dense[0], cfg.encoder_dense[1]);
        enc_fc2_ = DenseLayer<T>(cfg.encoder_dense[1], cfg.encoder_dense[2]);
        enc_mu_ = DenseLayer<T>(cfg.encoder_dense[2], cfg.latent_dim);
        enc_logvar_ = DenseLayer<T>(cfg.encoder_dense[2], cfg.latent_dim);

        dec_fc_ = DenseLayer<T>(cfg.latent_dim + cfg.cond_vector_dim(), cfg.decoder_dense);
        dec_bn_fc_ = BatchNormLayer<T>(cfg.decoder_dense);
        int bc = cfg.bottleneck_channels();
        dec_convs_.emplace_back(bc, cfg.decoder_channels[0]);
        dec_convs_.emplace_back(cfg.decoder_channels[0], cfg.decoder_channels[1]);
        dec_convs_.emplace_back(cfg.decoder_channels[1], cfg.decoder_channels[2]);
        dec_convs_.emplace_back(cfg.decoder_channels[2], cfg.decoder_channels[3]);
        dec_convs_.emplace_back(cfg.decoder_channels[3], cfg.decoder_channels[4]);
    }

    void init(Rng& rng) {
        for (auto& c : embed_convs_) c.init(rng);
        embed_proj_.init(rng);
        for (auto& c : enc_convs_) c.init(rng);
        enc_fc0_.init(rng);
        enc_fc1_.init(rng);
        enc_fc2_.init(rng);
        enc_mu_.init(rng);
        enc_logvar_.init(rng);
        dec_fc_.init(rng);
        for (auto& c : dec_convs_) c.init(rng);
    }

    // image stack [B, I, I, C] -> slab [B, e, e, slab_depth, 1] + flat vector
    ConditionEmbeddingT<T> embed_condition(const TensorT<T>& images) {
        int I = cfg.cond_image_extent;
        if (images.rank() != 4 || images.extent(1) != I || images.extent(2) != I ||
            images.extent(3) != cfg.cond_channels)
            throw std::invalid_argument("embed_condition: expected [B," + std::to_string(I) +
                                        "," + std::to_string(I) + "," +
                                        std::to_string(cfg.cond_channels) + "], got " +
                                        shape_str(images.shape));
        TensorT<T> h = images;
        for (auto& conv : embed_convs_) h = leaky_relu(conv.forward(h), T(cfg.alpha));
        h = embed_proj_.forward(h);  // [B, e, e, slab_depth]
        int b = h.extent(0), e = cfg.voxel_extent, s = cfg.cond_slab_depth;
        ConditionEmbeddingT<T> out;
        out.slab = reshape(h, {b, e, e, s, 1});
        out.vector = reshape(h, {b, e * e * s});
        return out;
    }

    // voxels [B, e, e, e, 1] + slab -> (mu, log_var), each [B, latent]
    std::pair<TensorT<T>, TensorT<T>> encode(const TensorT<T>& voxels, const TensorT<T>& slab,
                                             const ForwardMode& mode) {
        int e = cfg.voxel_extent;
        if (voxels.rank() != 5 || voxels.extent(1) != e || voxels.extent(2) != e ||
            voxels.extent(3) != e || voxels.extent(4) != 1)
            throw std::invalid_argument("encode: expected voxels [B," + std::to_string(e) + "," +
                                        std::to_string(e) + "," + std::to_string(e) +
                                        ",1], got " + shape_str(voxels.shape));
        for (std::size_t i = 0; i < voxels.numel(); ++i)
            if (voxels[i] != T(0) && voxels[i] != T(1))
                throw std::invalid_argument("encode: voxel occupancy must be binary");
        if (slab.rank() != 5 || slab.extent(0) != voxels.extent(0) || slab.extent(1) != e ||
            slab.extent(2) != e || slab.extent(3) != cfg.cond_slab_depth || slab.extent(4) != 1)
            throw std::invalid_argument("encode: condition slab " + shape_str(slab.shape) +
                                        " does not match voxels " + shape_str(voxels.shape));

        TensorT<T> h = concat<T>({voxels, slab}, 3);
        h = maxpool3d_padded(leaky_relu(enc_convs_[0].forward(h), T(cfg.alpha)));
        h = maxpool3d_padded(enc_bn1_.forward(leaky_relu(enc_convs_[1].forward(h), T(cfg.alpha)), mode));
        h = maxpool3d_padded(enc_bn2_.forward(leaky_relu(enc_convs_[2].forward(h), T(cfg.alpha)), mode));
        h = enc_convs_[3].forward(h);
        h = reshape(h, {h.extent(0), flatten_dim()});
        h = leaky_relu(enc_fc0_.forward(h), T(cfg.alpha));
        h = enc_bn_fc_.forward(h, mode);
        h = apply_dropout(h, mode);
        h = leaky_relu(enc_fc1_.forward(h), T(cfg.alpha));
        h = enc_fc2_.forward(h);
        return {enc_mu_.forward(h), enc_logvar_.forward(h)};
    }

    // latent [B, latent] + condition vector [B, V] -> logits [B, e, e, e, 1]
    TensorT<T> decode(const TensorT<T>& latent, const TensorT<T>& cond_vector,
                      const ForwardMode& mode) {
        if (latent.rank() != 2 || latent.extent(1) != cfg.latent_dim)
            throw std::invalid_argument("decode: expected latent [B," +
                                        std::to_string(cfg.latent_dim) + "], got " +
                                        shape_str(latent.shape));
        if (cond_vector.rank() != 2 || cond_vector.extent(0) != latent.extent(0) ||
            cond_vector.extent(1) != cfg.cond_vector_dim())
            throw std::invalid_argument("decode: condition vector " + shape_str(cond_vector.shape) +
                                        " does not match latent " + shape_str(latent.shape));

        TensorT<T> h = concat<T>({latent, cond_vector}, 1);
        h = leaky_relu(dec_fc_.forward(h), T(cfg.alpha));
        h = dec_bn_fc_.forward(h, mode);
        h = apply_dropout(h, mode);
        int b = h.extent(0), be = cfg.bottleneck_extent();
        h = reshape(h, {b, be, be, be, cfg.bottleneck_channels()});
        h = leaky_relu(dec_convs_[0].forward(h), T(cfg.alpha));
        h = upsample3d(h);
        h = leaky_relu(dec_convs_[1].forward(h), T(cfg.alpha));
        h = upsample3d(h);
        h = leaky_relu(dec_convs_[2].forward(h), T(cfg.alpha));
        h = upsample3d(h);
        h = leaky_relu(dec_convs_[3].forward(h), T(cfg.alpha));
        return dec_convs_[4].forward(h);
    }

    // Full training-graph pass: embed, encode, sample, decode, score.
    LossPartsT<T> elbo(const TensorT<T>& voxels, const TensorT<T>& images, const TensorT<T>& eps,
                       const ForwardMode& mode) {
        ConditionEmbeddingT<T> cond = embed_condition(images);
        auto [mu, log_var] = encode(voxels, cond.slab, mode);
        TensorT<T> latent = reparameterize(mu, log_var, eps);
        TensorT<T> logits = decode(latent, cond.vector, mode);
        return elbo_loss(logits, voxels, mu, log_var, T(cfg.kl_weight), cfg.recon_loss);
    }

    // Test-phase prediction: the encoder is dropped and the latent input is
    // the noise draw itself. Single image [I, I, C], eps [latent].
    TensorT<T> predict(const TensorT<T>& image, const TensorT<T>& eps) {
        if (image.rank() != 3)
            throw std::invalid_argument("predict: expected image [I,I,C], got " +
                                        shape_str(image.shape));
        TensorT<T> batched = image.viewed({1, image.extent(0), image.extent(1), image.extent(2)});
        ConditionEmbeddingT<T> cond = embed_condition(batched);
        return predict_with(cond, eps);
    }

    // Prediction from a precomputed condition (saves re-embedding when many
    // noise values are decoded for one image).
    TensorT<T> predict_with(const ConditionEmbeddingT<T>& cond, const TensorT<T>& eps) {
        if (eps.rank() != 1 || eps.extent(0) != cfg.latent_dim)
            throw std::invalid_argument("predict: expected eps [" +
                                        std::to_string(cfg.latent_dim) + "], got " +
                                        shape_str(eps.shape));
        TensorT<T> latent = eps.viewed({1, cfg.latent_dim});
        TensorT<T> logits = decode(latent, cond.vector, ForwardMode::eval());
        int e = cfg.voxel_extent;
        return sigmoid(logits).viewed({e, e, e, 1});
    }

    // Trainable parameters, in checkpoint order.
    std::vector<NamedTensorRef<T>> parameters() {
        std::vector<NamedTensorRef<T>> out;
        collect(out, /*with_stats=*/false);
        return out;
    }

    // Parameters plus batch-norm running statistics; everything a checkpoint
    // must round-trip.
    std::vector<NamedTensorRef<T>> state() {
        std::vector<NamedTensorRef<T>> out;
        collect(out, /*with_stats=*/true);
        return out;
    }

    template <class U>
    CvaeT<U> cast() const {
        CvaeT<U> other(cfg);
        auto src = const_cast<CvaeT*>(this)->state();
        auto dst = other.state();
        for (std::size_t i = 0; i < src.size(); ++i)
            *dst[i].tensor = astype<U>(*src[i].tensor);
        return other;
    }

    int flatten_dim() const {
        int e = cfg.voxel_extent;
        int d = cfg.voxel_extent + cfg.cond_slab_depth;
        for (int pool = 0; pool < 3; ++pool) {
            e /= 2;
            d = (d % 2 ? d + 1 : d) / 2;
        }
        return e * e * d * cfg.encoder_channels[3];
    }

private:
    TensorT<T> apply_dropout(const TensorT<T>& h, const ForwardMode& mode) {
        if (!mode.train || cfg.dropout_rate == 0.f) return h;
        if (!mode.dropout_rng)
            throw std::invalid_argument("forward: train mode requires a dropout rng");
        return dropout(h, double(cfg.dropout_rate), true, *mode.dropout_rng);
    }

    void collect(std::vector<NamedTensorRef<T>>& out, bool with_stats) {
        for (std::size_t i = 0; i < embed_convs_.size(); ++i)
            embed_convs_[i].collect("embed.conv" + std::to_string(i), out);
        embed_proj_.collect("embed.proj", out);
        for (std::size_t i = 0; i < enc_convs_.size(); ++i)
            enc_convs_[i].collect("encoder.conv" + std::to_string(i), out);
        enc_bn1_.collect("encoder.bn1", out);
        if (with_stats) enc_bn1_.collect_stats("encoder.bn1", out);
        enc_bn2_.collect("encoder.bn2", out);
        if (with_stats) enc_bn2_.collect_stats("encoder.bn2", out);
        enc_fc0_.collect("encoder.fc0", out);
        enc_bn_fc_.collect("encoder.bn_fc", out);
        if (with_stats) enc_bn_fc_.collect_stats("encoder.bn_fc", out);
        enc_fc1_.collect("encoder.fc1", out);
        enc_fc2_.collect("encoder.fc2", out);
        enc_mu_.collect("encoder.mu", out);
        enc_logvar_.collect("encoder.logvar", out);
        dec_fc_.collect("decoder.fc", out);
        dec_bn_fc_.collect("decoder.bn_fc", out);
        if (with_stats) dec_bn_fc_.collect_stats("decoder.bn_fc", out);
        for (std::size_t i = 0; i < dec_convs_.size(); ++i)
            dec_convs_[i].collect("decoder.conv" + std::to_string(i), out);
    }

    std::vector<Conv2dLayer<T>> embed_convs_;
    Conv2dLayer<T> embed_proj_;
    std::vector<Conv3dLayer<T>> enc_convs_;
    BatchNormLayer<T> enc_bn1_, enc_bn2_;
    DenseLayer<T> enc_fc0_, enc_fc1_, enc_fc2_;
    BatchNormLayer<T> enc_bn_fc_;
    DenseLayer<T> enc_mu_, enc_logvar_;
    DenseLayer<T> dec_fc_;
    BatchNormLayer<T> dec_bn_fc_;
    std::vector<Conv3dLayer<T>> dec_convs_;
};

using Cvae = CvaeT<float>;

// Checkpoint container: magic `CVAE`, version u32, length-prefixed config
// text, parameter count u32, then named tensors; little-endian.
void save_checkpoint(Cvae& model, const std::string& path);
Cvae load_checkpoint(const std::string& path);
Cvae load_checkpoint(const std::string& path, Profile expected_profile);

}  // namespace voxcvae
