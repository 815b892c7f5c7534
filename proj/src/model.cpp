#include "t2tbio/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "t2tbio/error.hpp"
#include "t2tbio/kernels.hpp"

namespace t2tbio {

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* name) {
        if (v == 0) fail(ErrorKind::config, std::string("model.") + name + " must be positive");
    };
    positive(vocab_size, "vocab_size");
    positive(d_model, "d_model");
    positive(n_heads, "n_heads");
    positive(d_ff, "d_ff");
    positive(n_encoder_layers, "n_encoder_layers");
    positive(n_decoder_layers, "n_decoder_layers");
    positive(rel_pos_buckets, "rel_pos_buckets");
    positive(rel_pos_max_distance, "rel_pos_max_distance");
    positive(max_seq_len, "max_seq_len");
    if (d_model % n_heads != 0) fail(ErrorKind::config, "model.d_model must be divisible by model.n_heads");
    if (rel_pos_buckets < 4) fail(ErrorKind::config, "model.rel_pos_buckets must be at least 4");
    if (rel_pos_max_distance < rel_pos_buckets) {
        fail(ErrorKind::config, "model.rel_pos_max_distance must be >= rel_pos_buckets");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail(ErrorKind::config, "model.dropout_rate must be in [0, 1)");
}

std::vector<TensorInfo> param_layout(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t V = cfg.vocab_size, D = cfg.d_model, F = cfg.d_ff, B = cfg.rel_pos_buckets, H = cfg.n_heads;
    std::vector<TensorInfo> out;
    std::size_t offset = 0;
    auto add = [&](std::string name, std::vector<std::size_t> shape) {
        std::size_t n = 1;
        for (auto s : shape) n *= s;
        out.push_back({std::move(name), std::move(shape), offset, n});
        offset += n;
    };
    auto attn = [&](const std::string& p) {
        add(p + ".norm", {D});
        add(p + ".q", {D, D});
        add(p + ".k", {D, D});
        add(p + ".v", {D, D});
        add(p + ".o", {D, D});
    };
    auto ff = [&](const std::string& p) {
        add(p + ".norm", {D});
        add(p + ".wi", {D, F});
        add(p + ".wo", {F, D});
    };
    add("shared.embedding", {V, D});
    add("encoder.rel_bias", {B, H});
    for (std::size_t l = 0; l < cfg.n_encoder_layers; ++l) {
        const std::string p = "encoder.layer." + std::to_string(l);
        attn(p + ".attn");
        ff(p + ".ff");
    }
    add("encoder.final_norm", {D});
    add("decoder.rel_bias", {B, H});
    for (std::size_t l = 0; l < cfg.n_decoder_layers; ++l) {
        const std::string p = "decoder.layer." + std::to_string(l);
        attn(p + ".self");
        attn(p + ".cross");
        ff(p + ".ff");
    }
    add("decoder.final_norm", {D});
    return out;
}

std::size_t parameter_count(const ModelConfig& cfg) {
    const std::size_t V = cfg.vocab_size, D = cfg.d_model, F = cfg.d_ff, B = cfg.rel_pos_buckets, H = cfg.n_heads;
    return V * D + 2 * B * H + cfg.n_encoder_layers * (2 * D + 4 * D * D + 2 * D * F) +
           cfg.n_decoder_layers * (3 * D + 8 * D * D + 2 * D * F) + 2 * D;
}

template <typename T>
ParamStore<T>::ParamStore(const ModelConfig& cfg) : layout_(param_layout(cfg)) {
    data_.assign(layout_.empty() ? 0 : layout_.back().offset + layout_.back().size, T(0));
}

template <typename T>
const TensorInfo& ParamStore<T>::info(std::string_view name) const {
    for (const auto& t : layout_) {
        if (t.name == name) return t;
    }
    fail(ErrorKind::config, "unknown tensor: " + std::string(name));
}

template <typename T>
std::span<T> ParamStore<T>::tensor(std::string_view name) {
    const auto& t = info(name);
    return std::span<T>(data_).subspan(t.offset, t.size);
}

template <typename T>
std::span<const T> ParamStore<T>::tensor(std::string_view name) const {
    const auto& t = info(name);
    return std::span<const T>(data_).subspan(t.offset, t.size);
}

template <typename T>
bool ParamStore<T>::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
void ParamStore<T>::fill(T value) {
    std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    ParamStore<T> p(cfg);
    Rng rng(seed);
    auto values = p.values();
    for (const auto& t : p.layout()) {
        const std::string& n = t.name;
        double stddev = 0.0;
        double constant = 0.0;
        if (n.ends_with("norm")) {
            constant = 1.0;
        } else if (n == "shared.embedding") {
            stddev = 1.0;
        } else if (n.ends_with("rel_bias")) {
            stddev = 0.1;
        } else {
            stddev = 1.0 / std::sqrt(static_cast<double>(t.shape[0]));
        }
        for (std::size_t i = 0; i < t.size; ++i) {
            values[t.offset + i] = static_cast<T>(stddev > 0.0 ? stddev * rng.normal() : constant);
        }
    }
    return p;
}

std::size_t Batch::loss_tokens() const {
    return static_cast<std::size_t>(std::count(target_mask.begin(), target_mask.end(), std::uint8_t{1}));
}

Batch make_batch(std::span<const SequencePair> pairs) {
    Batch b;
    b.rows = pairs.size();
    for (const auto& p : pairs) {
        b.enc_len = std::max(b.enc_len, p.input.size());
        b.dec_len = std::max(b.dec_len, p.target.size());
    }
    b.encoder_input_ids.assign(b.rows * b.enc_len, Vocabulary::pad_id);
    b.encoder_mask.assign(b.rows * b.enc_len, 0);
    b.decoder_input_ids.assign(b.rows * b.dec_len, Vocabulary::pad_id);
    b.target_ids.assign(b.rows * b.dec_len, Vocabulary::pad_id);
    b.target_mask.assign(b.rows * b.dec_len, 0);
    for (std::size_t r = 0; r < b.rows; ++r) {
        const auto& p = pairs[r];
        for (std::size_t i = 0; i < p.input.size(); ++i) {
            b.encoder_input_ids[r * b.enc_len + i] = p.input[i];
            b.encoder_mask[r * b.enc_len + i] = p.input[i] == Vocabulary::pad_id ? 0 : 1;
        }
        for (std::size_t i = 0; i < p.target.size(); ++i) {
            b.target_ids[r * b.dec_len + i] = p.target[i];
            b.target_mask[r * b.dec_len + i] = p.target[i] == Vocabulary::pad_id ? 0 : 1;
            if (i + 1 < b.dec_len) b.decoder_input_ids[r * b.dec_len + i + 1] = p.target[i];
        }
    }
    return b;
}

int relative_position_bucket(long relative_distance, std::size_t n_buckets, std::size_t max_distance,
                             bool bidirectional) {
    long n = -relative_distance;
    long ret = 0;
    auto buckets = static_cast<long>(n_buckets);
    if (bidirectional) {
        buckets /= 2;
        if (n < 0) ret += buckets;
        n = std::labs(n);
    } else {
        n = std::max(n, 0L);
    }
    const long max_exact = buckets / 2;
    if (n < max_exact) return static_cast<int>(ret + n);
    const double scaled = std::log(static_cast<double>(n) / static_cast<double>(max_exact)) /
                          std::log(static_cast<double>(max_distance) / static_cast<double>(max_exact)) *
                          static_cast<double>(buckets - max_exact);
    const long large = std::min(max_exact + static_cast<long>(scaled), buckets - 1);
    return static_cast<int>(ret + large);
}

namespace {

constexpr double kNormEps = 1e-6;

struct AttnOffsets {
    std::size_t norm, q, k, v, o;
};
struct FfOffsets {
    std::size_t norm, wi, wo;
};
struct EncLayerOffsets {
    AttnOffsets attn;
    FfOffsets ff;
};
struct DecLayerOffsets {
    AttnOffsets self, cross;
    FfOffsets ff;
};
struct Offsets {
    std::size_t embed, enc_bias, enc_final, dec_bias, dec_final;
    std::vector<EncLayerOffsets> enc;
    std::vector<DecLayerOffsets> dec;
};

Offsets offsets_for(const ModelConfig& cfg, std::size_t param_size) {
    const auto layout = param_layout(cfg);
    if (layout.back().offset + layout.back().size != param_size) {
        fail(ErrorKind::config, "parameter store does not match model config");
    }
    std::size_t i = 0;
    auto next = [&]() { return layout[i++].offset; };
    auto attn = [&]() { return AttnOffsets{next(), next(), next(), next(), next()}; };
    auto ff = [&]() { return FfOffsets{next(), next(), next()}; };
    Offsets o{};
    o.embed = next();
    o.enc_bias = next();
    for (std::size_t l = 0; l < cfg.n_encoder_layers; ++l) {
        auto a = attn();
        o.enc.push_back({a, ff()});
    }
    o.enc_final = next();
    o.dec_bias = next();
    for (std::size_t l = 0; l < cfg.n_decoder_layers; ++l) {
        auto s = attn();
        auto c = attn();
        o.dec.push_back({s, c, ff()});
    }
    o.dec_final = next();
    return o;
}

template <typename T>
using Vec = std::vector<T>;

// Row-major dense helpers built on the dispatched kernels.
template <typename T>
struct Ops {
    const kernels::KernelTable<T>& k = kernels::active<T>();

    // Y[n, out] = X[n, in] * W[in, out]
    void linear(const T* x, std::size_t n, std::size_t in, const T* w, std::size_t out, T* y) const {
        std::fill(y, y + n * out, T(0));
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < in; ++j) {
                const T a = x[i * in + j];
                if (a != T(0)) k.axpy(a, w + j * out, y + i * out, out);
            }
        }
    }

    // dX += dY * W^T ; dW += X^T * dY
    void linear_back(const T* x, std::size_t n, std::size_t in, const T* w, std::size_t out, const T* dy, T* dx,
                     T* dw) const {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < in; ++j) {
                if (dx) dx[i * in + j] += k.dot(dy + i * out, w + j * out, out);
                const T a = x[i * in + j];
                if (a != T(0)) k.axpy(a, dy + i * out, dw + j * out, out);
            }
        }
    }

    void rms(const T* x, std::size_t n, std::size_t d, const T* g, T* y, T* inv) const {
        for (std::size_t i = 0; i < n; ++i) {
            const T ms = k.sum_squares(x + i * d, d) / static_cast<T>(d);
            const T r = T(1) / std::sqrt(ms + static_cast<T>(kNormEps));
            inv[i] = r;
            for (std::size_t j = 0; j < d; ++j) y[i * d + j] = x[i * d + j] * r * g[j];
        }
    }

    void rms_back(const T* x, std::size_t n, std::size_t d, const T* g, const T* inv, const T* dy, T* dx,
                  T* dg) const {
        for (std::size_t i = 0; i < n; ++i) {
            const T r = inv[i];
            const T* xi = x + i * d;
            const T* dyi = dy + i * d;
            T proj = 0;
            for (std::size_t j = 0; j < d; ++j) {
                proj += dyi[j] * g[j] * xi[j];
                dg[j] += dyi[j] * xi[j] * r;
            }
            const T coef = r * r * r * proj / static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) dx[i * d + j] += r * g[j] * dyi[j] - coef * xi[j];
        }
    }
};

template <typename T>
struct AttnCache {
    Vec<T> x;    // normalised query-side input [nq, D]
    Vec<T> inv;  // rms factors of the query-side input
    Vec<T> q, kk, v, probs, ctx;
    Vec<T> drop;  // dropout scale per output element, empty when off
};

template <typename T>
struct FfCache {
    Vec<T> x, inv, h_pre, h, drop;
};

template <typename T>
struct EncLayerCache {
    Vec<T> x_in, x_mid;
    AttnCache<T> attn;
    FfCache<T> ff;
};

template <typename T>
struct DecLayerCache {
    Vec<T> x_in, x_mid1, x_mid2;
    AttnCache<T> self, cross;
    FfCache<T> ff;
};

template <typename T>
struct RowCache {
    std::size_t n = 0, m = 0;
    Vec<T> enc_x_last, enc_final_inv, enc_out;
    Vec<T> dec_x_last, dec_final_inv, dec_out;
    std::vector<EncLayerCache<T>> enc;
    std::vector<DecLayerCache<T>> dec;
    std::vector<int> enc_buckets, dec_buckets;
};

template <typename T>
class Transformer {
public:
    Transformer(const ModelConfig& cfg, std::span<const T> p, Rng* dropout_rng)
        : cfg_(cfg), p_(p.data()), off_(offsets_for(cfg, p.size())),
          D_(cfg.d_model), H_(cfg.n_heads), dh_(cfg.d_head()), F_(cfg.d_ff),
          scale_(T(1) / std::sqrt(static_cast<T>(cfg.d_head()))),
          out_scale_(T(1) / std::sqrt(static_cast<T>(cfg.d_model))),
          dropout_(cfg.dropout_rate > 0.0 && dropout_rng != nullptr ? dropout_rng : nullptr) {}

    // Encoder over ids[0..n); mask marks real tokens.
    void encode(const TokenId* ids, const std::uint8_t* mask, std::size_t n, RowCache<T>& c) const {
        c.n = n;
        c.enc.resize(cfg_.n_encoder_layers);
        c.enc_buckets = buckets(n, n, true);
        Vec<T> x = embed(ids, n);
        for (std::size_t l = 0; l < cfg_.n_encoder_layers; ++l) {
            auto& lc = c.enc[l];
            const auto& lo = off_.enc[l];
            lc.x_in = x;
            Vec<T> a = attention(lo.attn, x, n, nullptr, n, c.enc_buckets.data(), p_ + off_.enc_bias, false, mask,
                                 lc.attn);
            for (std::size_t i = 0; i < x.size(); ++i) x[i] += a[i];
            lc.x_mid = x;
            Vec<T> f = feed_forward(lo.ff, x, n, lc.ff);
            for (std::size_t i = 0; i < x.size(); ++i) x[i] += f[i];
        }
        c.enc_x_last = x;
        c.enc_out.assign(n * D_, T(0));
        c.enc_final_inv.assign(n, T(0));
        ops_.rms(x.data(), n, D_, p_ + off_.enc_final, c.enc_out.data(), c.enc_final_inv.data());
    }

    void decode(const TokenId* ids, std::size_t m, const std::uint8_t* enc_mask, RowCache<T>& c) const {
        c.m = m;
        c.dec.resize(cfg_.n_decoder_layers);
        c.dec_buckets = buckets(m, m, false);
        Vec<T> x = embed(ids, m);
        for (std::size_t l = 0; l < cfg_.n_decoder_layers; ++l) {
            auto& lc = c.dec[l];
            const auto& lo = off_.dec[l];
            lc.x_in = x;
            Vec<T> a = attention(lo.self, x, m, nullptr, m, c.dec_buckets.data(), p_ + off_.dec_bias, true, nullptr,
                                 lc.self);
            for (std::size_t i = 0; i < x.size(); ++i) x[i] += a[i];
            lc.x_mid1 = x;
            Vec<T> b = attention(lo.cross, x, m, c.enc_out.data(), c.n, nullptr, nullptr, false, enc_mask, lc.cross);
            for (std::size_t i = 0; i < x.size(); ++i) x[i] += b[i];
            lc.x_mid2 = x;
            Vec<T> f = feed_forward(lo.ff, x, m, lc.ff);
            for (std::size_t i = 0; i < x.size(); ++i) x[i] += f[i];
        }
        c.dec_x_last = x;
        c.dec_out.assign(m * D_, T(0));
        c.dec_final_inv.assign(m, T(0));
        ops_.rms(x.data(), m, D_, p_ + off_.dec_final, c.dec_out.data(), c.dec_final_inv.data());
    }

    // logits for decoder rows [from, m) into out (row-major, vocab wide).
    void logits(const RowCache<T>& c, std::size_t from, T* out) const {
        const std::size_t V = cfg_.vocab_size;
        const T* emb = p_ + off_.embed;
        for (std::size_t i = from; i < c.m; ++i) {
            const T* h = c.dec_out.data() + i * D_;
            T* row = out + (i - from) * V;
            for (std::size_t v = 0; v < V; ++v) row[v] = out_scale_ * ops_.k.dot(h, emb + v * D_, D_);
        }
    }

    // Backpropagates d_logits [m, V] through the whole row, accumulating into g.
    void backward(const RowCache<T>& c, const TokenId* enc_ids, const TokenId* dec_ids, const std::uint8_t* enc_mask,
                  const T* d_logits, T* g) const {
        const std::size_t V = cfg_.vocab_size;
        const std::size_t m = c.m, n = c.n;
        const T* emb = p_ + off_.embed;
        T* d_emb = g + off_.embed;

        Vec<T> d_out(m * D_, T(0));
        for (std::size_t i = 0; i < m; ++i) {
            const T* dl = d_logits + i * V;
            for (std::size_t v = 0; v < V; ++v) {
                const T s = out_scale_ * dl[v];
                if (s == T(0)) continue;
                ops_.k.axpy(s, emb + v * D_, d_out.data() + i * D_, D_);
                ops_.k.axpy(s, c.dec_out.data() + i * D_, d_emb + v * D_, D_);
            }
        }
        Vec<T> dx(m * D_, T(0));
        ops_.rms_back(c.dec_x_last.data(), m, D_, p_ + off_.dec_final, c.dec_final_inv.data(), d_out.data(), dx.data(),
                      g + off_.dec_final);

        Vec<T> d_enc_out(n * D_, T(0));
        for (std::size_t l = cfg_.n_decoder_layers; l-- > 0;) {
            const auto& lc = c.dec[l];
            const auto& lo = off_.dec[l];
            // x_out = x_mid2 + ff(x_mid2)
            Vec<T> d_mid2 = dx;
            feed_forward_back(lo.ff, lc.x_mid2, m, lc.ff, dx, d_mid2, g);
            // x_mid2 = x_mid1 + cross(x_mid1, enc_out)
            Vec<T> d_mid1 = d_mid2;
            attention_back(lo.cross, lc.x_mid1, m, c.enc_out.data(), n, nullptr, nullptr, false, enc_mask, lc.cross,
                           d_mid2, d_mid1, d_enc_out.data(), g);
            // x_mid1 = x_in + self(x_in)
            Vec<T> d_in = d_mid1;
            attention_back(lo.self, lc.x_in, m, nullptr, m, c.dec_buckets.data(), g + off_.dec_bias, true, nullptr,
                           lc.self, d_mid1, d_in, nullptr, g);
            dx = std::move(d_in);
        }
        embed_back(dec_ids, m, dx, d_emb);

        Vec<T> dex(n * D_, T(0));
        ops_.rms_back(c.enc_x_last.data(), n, D_, p_ + off_.enc_final, c.enc_final_inv.data(), d_enc_out.data(),
                      dex.data(), g + off_.enc_final);
        for (std::size_t l = cfg_.n_encoder_layers; l-- > 0;) {
            const auto& lc = c.enc[l];
            const auto& lo = off_.enc[l];
            Vec<T> d_mid = dex;
            feed_forward_back(lo.ff, lc.x_mid, n, lc.ff, dex, d_mid, g);
            Vec<T> d_in = d_mid;
            attention_back(lo.attn, lc.x_in, n, nullptr, n, c.enc_buckets.data(), g + off_.enc_bias, false, enc_mask,
                           lc.attn, d_mid, d_in, nullptr, g);
            dex = std::move(d_in);
        }
        embed_back(enc_ids, n, dex, d_emb);
    }

private:
    std::vector<int> buckets(std::size_t nq, std::size_t nk, bool bidirectional) const {
        std::vector<int> b(nq * nk);
        for (std::size_t i = 0; i < nq; ++i) {
            for (std::size_t j = 0; j < nk; ++j) {
                b[i * nk + j] = relative_position_bucket(static_cast<long>(j) - static_cast<long>(i),
                                                         cfg_.rel_pos_buckets, cfg_.rel_pos_max_distance, bidirectional);
            }
        }
        return b;
    }

    Vec<T> embed(const TokenId* ids, std::size_t n) const {
        Vec<T> x(n * D_);
        for (std::size_t i = 0; i < n; ++i) {
            const auto id = static_cast<std::size_t>(ids[i]);
            std::copy_n(p_ + off_.embed + id * D_, D_, x.data() + i * D_);
        }
        return x;
    }

    void embed_back(const TokenId* ids, std::size_t n, const Vec<T>& dx, T* d_emb) const {
        for (std::size_t i = 0; i < n; ++i) {
            ops_.k.axpy(T(1), dx.data() + i * D_, d_emb + static_cast<std::size_t>(ids[i]) * D_, D_);
        }
    }

    void make_dropout(Vec<T>& drop, std::size_t size) const {
        drop.clear();
        if (!dropout_) return;
        const double rate = cfg_.dropout_rate;
        const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
        drop.resize(size);
        for (auto& d : drop) d = dropout_->uniform() < rate ? T(0) : keep_scale;
    }

    // Pre-norm multi-head attention. The query side is rms(x_resid); keys/values
    // come from the same normalised input, or from `memory` when given.
    Vec<T> attention(const AttnOffsets& o, const Vec<T>& x_resid, std::size_t nq, const T* memory, std::size_t nk,
                     const int* bucket, const T* bias, bool causal, const std::uint8_t* key_mask,
                     AttnCache<T>& c) const {
        c.x.assign(nq * D_, T(0));
        c.inv.assign(nq, T(0));
        ops_.rms(x_resid.data(), nq, D_, p_ + o.norm, c.x.data(), c.inv.data());
        const T* kv = memory ? memory : c.x.data();

        c.q.assign(nq * D_, T(0));
        c.kk.assign(nk * D_, T(0));
        c.v.assign(nk * D_, T(0));
        ops_.linear(c.x.data(), nq, D_, p_ + o.q, D_, c.q.data());
        ops_.linear(kv, nk, D_, p_ + o.k, D_, c.kk.data());
        ops_.linear(kv, nk, D_, p_ + o.v, D_, c.v.data());

        c.probs.assign(H_ * nq * nk, T(0));
        c.ctx.assign(nq * D_, T(0));
        for (std::size_t h = 0; h < H_; ++h) {
            for (std::size_t i = 0; i < nq; ++i) {
                T* pr = c.probs.data() + (h * nq + i) * nk;
                const T* qi = c.q.data() + i * D_ + h * dh_;
                T mx = -std::numeric_limits<T>::infinity();
                bool any = false;
                for (std::size_t j = 0; j < nk; ++j) {
                    if (!valid(i, j, causal, key_mask)) continue;
                    T s = scale_ * ops_.k.dot(qi, c.kk.data() + j * D_ + h * dh_, dh_);
                    if (bucket) s += bias[static_cast<std::size_t>(bucket[i * nk + j]) * H_ + h];
                    pr[j] = s;
                    mx = any ? std::max(mx, s) : s;
                    any = true;
                }
                if (!any) continue;
                T sum = 0;
                for (std::size_t j = 0; j < nk; ++j) {
                    if (!valid(i, j, causal, key_mask)) continue;
                    pr[j] = std::exp(pr[j] - mx);
                    sum += pr[j];
                }
                T* ci = c.ctx.data() + i * D_ + h * dh_;
                for (std::size_t j = 0; j < nk; ++j) {
                    if (!valid(i, j, causal, key_mask)) continue;
                    pr[j] /= sum;
                    ops_.k.axpy(pr[j], c.v.data() + j * D_ + h * dh_, ci, dh_);
                }
            }
        }
        Vec<T> out(nq * D_, T(0));
        ops_.linear(c.ctx.data(), nq, D_, p_ + o.o, D_, out.data());
        make_dropout(c.drop, out.size());
        if (!c.drop.empty()) {
            for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c.drop[i];
        }
        return out;
    }

    // d_branch: gradient of the sublayer output; accumulates into d_resid (query
    // residual input), d_memory (when memory was used) and g.
    void attention_back(const AttnOffsets& o, const Vec<T>& x_resid, std::size_t nq, const T* memory, std::size_t nk,
                        const int* bucket, T* d_bias, bool causal, const std::uint8_t* key_mask, const AttnCache<T>& c,
                        const Vec<T>& d_branch, Vec<T>& d_resid, T* d_memory, T* g) const {
        Vec<T> d_out = d_branch;
        if (!c.drop.empty()) {
            for (std::size_t i = 0; i < d_out.size(); ++i) d_out[i] *= c.drop[i];
        }
        Vec<T> d_ctx(nq * D_, T(0));
        ops_.linear_back(c.ctx.data(), nq, D_, p_ + o.o, D_, d_out.data(), d_ctx.data(), g + o.o);

        Vec<T> dq(nq * D_, T(0)), dk(nk * D_, T(0)), dv(nk * D_, T(0));
        Vec<T> dp(nk);
        for (std::size_t h = 0; h < H_; ++h) {
            for (std::size_t i = 0; i < nq; ++i) {
                const T* pr = c.probs.data() + (h * nq + i) * nk;
                const T* dci = d_ctx.data() + i * D_ + h * dh_;
                T weighted = 0;
                for (std::size_t j = 0; j < nk; ++j) {
                    if (!valid(i, j, causal, key_mask)) continue;
                    dp[j] = ops_.k.dot(dci, c.v.data() + j * D_ + h * dh_, dh_);
                    ops_.k.axpy(pr[j], dci, dv.data() + j * D_ + h * dh_, dh_);
                    weighted += pr[j] * dp[j];
                }
                const T* qi = c.q.data() + i * D_ + h * dh_;
                T* dqi = dq.data() + i * D_ + h * dh_;
                for (std::size_t j = 0; j < nk; ++j) {
                    if (!valid(i, j, causal, key_mask)) continue;
                    const T ds = pr[j] * (dp[j] - weighted);
                    if (bucket) d_bias[static_cast<std::size_t>(bucket[i * nk + j]) * H_ + h] += ds;
                    ops_.k.axpy(scale_ * ds, c.kk.data() + j * D_ + h * dh_, dqi, dh_);
                    ops_.k.axpy(scale_ * ds, qi, dk.data() + j * D_ + h * dh_, dh_);
                }
            }
        }

        Vec<T> dx(nq * D_, T(0));
        ops_.linear_back(c.x.data(), nq, D_, p_ + o.q, D_, dq.data(), dx.data(), g + o.q);
        if (memory) {
            ops_.linear_back(memory, nk, D_, p_ + o.k, D_, dk.data(), d_memory, g + o.k);
            ops_.linear_back(memory, nk, D_, p_ + o.v, D_, dv.data(), d_memory, g + o.v);
        } else {
            ops_.linear_back(c.x.data(), nk, D_, p_ + o.k, D_, dk.data(), dx.data(), g + o.k);
            ops_.linear_back(c.x.data(), nk, D_, p_ + o.v, D_, dv.data(), dx.data(), g + o.v);
        }
        ops_.rms_back(x_resid.data(), nq, D_, p_ + o.norm, c.inv.data(), dx.data(), d_resid.data(), g + o.norm);
    }

    Vec<T> feed_forward(const FfOffsets& o, const Vec<T>& x_resid, std::size_t n, FfCache<T>& c) const {
        c.x.assign(n * D_, T(0));
        c.inv.assign(n, T(0));
        ops_.rms(x_resid.data(), n, D_, p_ + o.norm, c.x.data(), c.inv.data());
        c.h_pre.assign(n * F_, T(0));
        ops_.linear(c.x.data(), n, D_, p_ + o.wi, F_, c.h_pre.data());
        c.h.resize(c.h_pre.size());
        for (std::size_t i = 0; i < c.h.size(); ++i) c.h[i] = c.h_pre[i] > T(0) ? c.h_pre[i] : T(0);
        Vec<T> out(n * D_, T(0));
        ops_.linear(c.h.data(), n, F_, p_ + o.wo, D_, out.data());
        make_dropout(c.drop, out.size());
        if (!c.drop.empty()) {
            for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c.drop[i];
        }
        return out;
    }

    void feed_forward_back(const FfOffsets& o, const Vec<T>& x_resid, std::size_t n, const FfCache<T>& c,
                           const Vec<T>& d_branch, Vec<T>& d_resid, T* g) const {
        Vec<T> d_out = d_branch;
        if (!c.drop.empty()) {
            for (std::size_t i = 0; i < d_out.size(); ++i) d_out[i] *= c.drop[i];
        }
        Vec<T> dh(n * F_, T(0));
        ops_.linear_back(c.h.data(), n, F_, p_ + o.wo, D_, d_out.data(), dh.data(), g + o.wo);
        for (std::size_t i = 0; i < dh.size(); ++i) {
            if (!(c.h_pre[i] > T(0))) dh[i] = T(0);
        }
        Vec<T> dx(n * D_, T(0));
        ops_.linear_back(c.x.data(), n, D_, p_ + o.wi, F_, dh.data(), dx.data(), g + o.wi);
        ops_.rms_back(x_resid.data(), n, D_, p_ + o.norm, c.inv.data(), dx.data(), d_resid.data(), g + o.norm);
    }

    static bool valid(std::size_t i, std::size_t j, bool causal, const std::uint8_t* key_mask) {
        if (causal && j > i) return false;
        return key_mask == nullptr || key_mask[j] != 0;
    }

    const ModelConfig& cfg_;
    const T* p_;
    Offsets off_;
    std::size_t D_, H_, dh_, F_;
    T scale_, out_scale_;
    Rng* dropout_;
    Ops<T> ops_;
};

void check_batch(const ModelConfig& cfg, const Batch& b) {
    if (b.encoder_input_ids.size() != b.rows * b.enc_len || b.encoder_mask.size() != b.rows * b.enc_len ||
        b.decoder_input_ids.size() != b.rows * b.dec_len || b.target_ids.size() != b.rows * b.dec_len ||
        b.target_mask.size() != b.rows * b.dec_len) {
        fail(ErrorKind::config, "batch shape mismatch");
    }
    if (b.enc_len > cfg.max_seq_len || b.dec_len > cfg.max_seq_len) {
        fail(ErrorKind::config, "sequence longer than model.max_seq_len");
    }
    auto check_ids = [&](const std::vector<TokenId>& ids) {
        for (TokenId t : ids) {
            if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
                fail(ErrorKind::data, "token id out of range: " + std::to_string(t));
            }
        }
    };
    check_ids(b.encoder_input_ids);
    check_ids(b.decoder_input_ids);
    check_ids(b.target_ids);
}

// Effective encoder length: through the last real token (at least 1).
std::size_t enc_extent(const Batch& b, std::size_t r) {
    std::size_t n = b.enc_len;
    while (n > 1 && b.encoder_mask[r * b.enc_len + n - 1] == 0) --n;
    return std::max<std::size_t>(n, b.enc_len == 0 ? 0 : 1);
}

std::size_t dec_extent(const Batch& b, std::size_t r) {
    std::size_t m = b.dec_len;
    while (m > 0 && b.target_mask[r * b.dec_len + m - 1] == 0) --m;
    return m;
}

template <typename T>
void check_finite(const T* v, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(v[i])) fail(ErrorKind::numeric, "numeric overflow: non-finite logits");
    }
}

// Softmax cross-entropy for one row; writes d_logits scaled by `inv_tokens` when non-null.
template <typename T>
double row_cross_entropy(T* logits, const TokenId* targets, const std::uint8_t* mask, std::size_t m, std::size_t V,
                         T inv_tokens, bool want_grad) {
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        T* row = logits + i * V;
        if (!mask[i]) {
            if (want_grad) std::fill(row, row + V, T(0));
            continue;
        }
        const T mx = *std::max_element(row, row + V);
        T sum = 0;
        for (std::size_t v = 0; v < V; ++v) sum += std::exp(row[v] - mx);
        const T log_z = mx + std::log(sum);
        const auto tgt = static_cast<std::size_t>(targets[i]);
        total += static_cast<double>(log_z - row[tgt]);
        if (want_grad) {
            for (std::size_t v = 0; v < V; ++v) row[v] = std::exp(row[v] - log_z) * inv_tokens;
            row[tgt] -= inv_tokens;
        }
    }
    return total;
}

}  // namespace

template <typename T>
std::vector<T> forward(const ParamStore<T>& params, const ModelConfig& cfg, const Batch& batch) {
    check_batch(cfg, batch);
    Transformer<T> model(cfg, params.values(), nullptr);
    const std::size_t V = cfg.vocab_size;
    std::vector<T> out(batch.rows * batch.dec_len * V, T(0));
    RowCache<T> c;
    for (std::size_t r = 0; r < batch.rows; ++r) {
        const std::size_t n = enc_extent(batch, r);
        model.encode(batch.encoder_input_ids.data() + r * batch.enc_len, batch.encoder_mask.data() + r * batch.enc_len,
                     n, c);
        model.decode(batch.decoder_input_ids.data() + r * batch.dec_len, batch.dec_len,
                     batch.encoder_mask.data() + r * batch.enc_len, c);
        T* dst = out.data() + r * batch.dec_len * V;
        model.logits(c, 0, dst);
        check_finite(dst, batch.dec_len * V);
    }
    return out;
}

template <typename T>
LossAndGrads<T> loss_and_grads(const ParamStore<T>& params, const ModelConfig& cfg, const Batch& batch,
                               Rng* dropout_rng) {
    check_batch(cfg, batch);
    const std::size_t tokens = batch.loss_tokens();
    if (tokens == 0) fail(ErrorKind::data, "empty loss: batch has no target tokens");
    Transformer<T> model(cfg, params.values(), dropout_rng);
    LossAndGrads<T> result{0.0, tokens, ParamStore<T>(cfg)};
    const std::size_t V = cfg.vocab_size;
    const T inv_tokens = T(1) / static_cast<T>(tokens);
    double total = 0.0;
    RowCache<T> c;
    std::vector<T> logits;
    for (std::size_t r = 0; r < batch.rows; ++r) {
        const std::size_t m = dec_extent(batch, r);
        if (m == 0) continue;
        const std::size_t n = enc_extent(batch, r);
        const TokenId* enc_ids = batch.encoder_input_ids.data() + r * batch.enc_len;
        const std::uint8_t* enc_mask = batch.encoder_mask.data() + r * batch.enc_len;
        const TokenId* dec_ids = batch.decoder_input_ids.data() + r * batch.dec_len;
        model.encode(enc_ids, enc_mask, n, c);
        model.decode(dec_ids, m, enc_mask, c);
        logits.assign(m * V, T(0));
        model.logits(c, 0, logits.data());
        check_finite(logits.data(), logits.size());
        total += row_cross_entropy(logits.data(), batch.target_ids.data() + r * batch.dec_len,
                                   batch.target_mask.data() + r * batch.dec_len, m, V, inv_tokens, true);
        model.backward(c, enc_ids, dec_ids, enc_mask, logits.data(), result.grads.values().data());
    }
    result.loss = total / static_cast<double>(tokens);
    return result;
}

template <typename T>
double loss(const ParamStore<T>& params, const ModelConfig& cfg, const Batch& batch) {
    check_batch(cfg, batch);
    const std::size_t tokens = batch.loss_tokens();
    if (tokens == 0) fail(ErrorKind::data, "empty loss: batch has no target tokens");
    Transformer<T> model(cfg, params.values(), nullptr);
    const std::size_t V = cfg.vocab_size;
    double total = 0.0;
    RowCache<T> c;
    std::vector<T> logits;
    for (std::size_t r = 0; r < batch.rows; ++r) {
        const std::size_t m = dec_extent(batch, r);
        if (m == 0) continue;
        const std::size_t n = enc_extent(batch, r);
        const std::uint8_t* enc_mask = batch.encoder_mask.data() + r * batch.enc_len;
        model.encode(batch.encoder_input_ids.data() + r * batch.enc_len, enc_mask, n, c);
        model.decode(batch.decoder_input_ids.data() + r * batch.dec_len, m, enc_mask, c);
        logits.assign(m * V, T(0));
        model.logits(c, 0, logits.data());
        check_finite(logits.data(), logits.size());
        total += row_cross_entropy(logits.data(), batch.target_ids.data() + r * batch.dec_len,
                                   batch.target_mask.data() + r * batch.dec_len, m, V, T(0), false);
    }
    return total / static_cast<double>(tokens);
}

template <typename T>
TokenSequence greedy_decode(const ParamStore<T>& params, const ModelConfig& cfg, std::span<const TokenId> encoder_ids,
                            std::size_t max_len) {
    TokenSequence out;
    if (max_len == 0) return out;
    if (encoder_ids.size() > cfg.max_seq_len) fail(ErrorKind::config, "sequence longer than model.max_seq_len");
    for (TokenId t : encoder_ids) {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) fail(ErrorKind::data, "token id out of range");
    }
    max_len = std::min(max_len, cfg.max_seq_len);
    Transformer<T> model(cfg, params.values(), nullptr);
    std::vector<std::uint8_t> mask(encoder_ids.size());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = encoder_ids[i] == Vocabulary::pad_id ? 0 : 1;
    std::vector<TokenId> enc(encoder_ids.begin(), encoder_ids.end());
    if (enc.empty()) {
        enc.push_back(Vocabulary::pad_id);
        mask.push_back(0);
    }
    RowCache<T> c;
    model.encode(enc.data(), mask.data(), enc.size(), c);

    std::vector<TokenId> dec{Vocabulary::pad_id};
    std::vector<T> row(cfg.vocab_size);
    while (out.size() < max_len) {
        model.decode(dec.data(), dec.size(), mask.data(), c);
        model.logits(c, dec.size() - 1, row.data());
        check_finite(row.data(), row.size());
        const auto best = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
        out.push_back(best);
        if (best == Vocabulary::eos_id) break;
        dec.push_back(best);
    }
    return out;
}

template class ParamStore<float>;
template class ParamStore<double>;
template ParamStore<float> init_params<float>(const ModelConfig&, std::uint64_t);
template ParamStore<double> init_params<double>(const ModelConfig&, std::uint64_t);
template std::vector<float> forward<float>(const ParamStore<float>&, const ModelConfig&, const Batch&);
template std::vector<double> forward<double>(const ParamStore<double>&, const ModelConfig&, const Batch&);
template LossAndGrads<float> loss_and_grads<float>(const ParamStore<float>&, const ModelConfig&, const Batch&, Rng*);
template LossAndGrads<double> loss_and_grads<double>(const ParamStore<double>&, const ModelConfig&, const Batch&,
                                                     Rng*);
template double loss<float>(const ParamStore<float>&, const ModelConfig&, const Batch&);
template double loss<double>(const ParamStore<double>&, const ModelConfig&, const Batch&);
template TokenSequence greedy_decode<float>(const ParamStore<float>&, const ModelConfig&, std::span<const TokenId>,
                                            std::size_t);
template TokenSequence greedy_decode<double>(const ParamStore<double>&, const ModelConfig&, std::span<const TokenId>,
                                             std::size_t);

}  // namespace t2tbio
