#include <doctest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "model_checks.hpp"
#include "t2tbio/error.hpp"
#include "t2tbio/kernels.hpp"
#include "t2tbio/model.hpp"
#include "test_support.hpp"

using namespace t2tbio;
using namespace t2tbio::test;

namespace {

using Mat = std::vector<std::vector<double>>;

// Straightforward re-implementation used as a reference for forward().
struct Reference {
    const ModelConfig& cfg;
    const ParamStore<double>& p;

    std::vector<double> t(const std::string& name) const {
        auto s = p.tensor(name);
        return {s.begin(), s.end()};
    }

    Mat rms(const Mat& x, const std::vector<double>& g) const {
        Mat y = x;
        for (auto& row : y) {
            double ms = 0;
            for (double v : row) ms += v * v;
            ms /= static_cast<double>(row.size());
            const double inv = 1.0 / std::sqrt(ms + 1e-6);
            for (std::size_t d = 0; d < row.size(); ++d) row[d] *= inv * g[d];
        }
        return y;
    }

    // x [n, in] times w [in, out]
    static Mat matmul(const Mat& x, const std::vector<double>& w, std::size_t out) {
        Mat y(x.size(), std::vector<double>(out, 0.0));
        for (std::size_t i = 0; i < x.size(); ++i)
            for (std::size_t a = 0; a < x[i].size(); ++a)
                for (std::size_t b = 0; b < out; ++b) y[i][b] += x[i][a] * w[a * out + b];
        return y;
    }

    static void add(Mat& x, const Mat& y) {
        for (std::size_t i = 0; i < x.size(); ++i)
            for (std::size_t d = 0; d < x[i].size(); ++d) x[i][d] += y[i][d];
    }

    Mat attention(const std::string& pre, const Mat& x, const Mat* memory, const std::vector<std::uint8_t>& key_ok,
                  bool causal, const std::string& bias_name, bool bidirectional) const {
        const std::size_t D = cfg.d_model, H = cfg.n_heads, dh = D / H;
        Mat xn = rms(x, t(pre + ".norm"));
        const Mat& kv = memory ? *memory : xn;
        Mat q = matmul(xn, t(pre + ".q"), D), k = matmul(kv, t(pre + ".k"), D), v = matmul(kv, t(pre + ".v"), D);
        std::vector<double> bias = bias_name.empty() ? std::vector<double>{} : t(bias_name);
        Mat ctx(x.size(), std::vector<double>(D, 0.0));
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < x.size(); ++i) {
                std::vector<double> s(kv.size(), -std::numeric_limits<double>::infinity());
                bool any = false;
                for (std::size_t j = 0; j < kv.size(); ++j) {
                    if (!key_ok[j] || (causal && j > i)) continue;
                    double dot = 0;
                    for (std::size_t d = 0; d < dh; ++d) dot += q[i][h * dh + d] * k[j][h * dh + d];
                    s[j] = dot / std::sqrt(static_cast<double>(dh));
                    if (!bias.empty()) {
                        const int b = relative_position_bucket(static_cast<long>(j) - static_cast<long>(i),
                                                               cfg.rel_pos_buckets, cfg.rel_pos_max_distance,
                                                               bidirectional);
                        s[j] += bias[static_cast<std::size_t>(b) * H + h];
                    }
                    any = true;
                }
                if (!any) continue;
                const double mx = *std::max_element(s.begin(), s.end());
                double z = 0;
                for (double& e : s) {
                    e = std::exp(e - mx);
                    z += e;
                }
                for (std::size_t j = 0; j < kv.size(); ++j)
                    for (std::size_t d = 0; d < dh; ++d) ctx[i][h * dh + d] += s[j] / z * v[j][h * dh + d];
            }
        }
        return matmul(ctx, t(pre + ".o"), D);
    }

    Mat ff(const std::string& pre, const Mat& x) const {
        Mat hid = matmul(rms(x, t(pre + ".norm")), t(pre + ".wi"), cfg.d_ff);
        for (auto& row : hid)
            for (double& v : row) v = std::max(v, 0.0);
        return matmul(hid, t(pre + ".wo"), cfg.d_model);
    }

    Mat embed(const std::vector<TokenId>& ids) const {
        const auto e = t("shared.embedding");
        Mat x;
        for (TokenId id : ids) {
            const auto off = static_cast<std::size_t>(id) * cfg.d_model;
            x.emplace_back(e.begin() + static_cast<long>(off), e.begin() + static_cast<long>(off + cfg.d_model));
        }
        return x;
    }

    Mat logits(const std::vector<TokenId>& enc, const std::vector<std::uint8_t>& enc_ok,
               const std::vector<TokenId>& dec) const {
        Mat x = embed(enc);
        for (std::size_t l = 0; l < cfg.n_encoder_layers; ++l) {
            const std::string pre = "encoder.layer." + std::to_string(l);
            add(x, attention(pre + ".attn", x, nullptr, enc_ok, false, "encoder.rel_bias", true));
            add(x, ff(pre + ".ff", x));
        }
        const Mat memory = rms(x, t("encoder.final_norm"));
        Mat y = embed(dec);
        const std::vector<std::uint8_t> all(dec.size(), 1);
        for (std::size_t l = 0; l < cfg.n_decoder_layers; ++l) {
            const std::string pre = "decoder.layer." + std::to_string(l);
            add(y, attention(pre + ".self", y, nullptr, all, true, "decoder.rel_bias", false));
            add(y, attention(pre + ".cross", y, &memory, enc_ok, false, "", false));
            add(y, ff(pre + ".ff", y));
        }
        const Mat out = rms(y, t("decoder.final_norm"));
        const auto e = t("shared.embedding");
        Mat lg(out.size(), std::vector<double>(cfg.vocab_size, 0.0));
        for (std::size_t i = 0; i < out.size(); ++i)
            for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
                double dot = 0;
                for (std::size_t d = 0; d < cfg.d_model; ++d) dot += out[i][d] * e[v * cfg.d_model + d];
                lg[i][v] = dot / std::sqrt(static_cast<double>(cfg.d_model));
            }
        return lg;
    }
};

ModelConfig small_config() {
    ModelConfig cfg = toy_config();
    cfg.d_model = 4;
    cfg.d_ff = 8;
    cfg.vocab_size = 12;
    return cfg;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("parameter count matches layout and closed form") {
    for (auto [V, D, H, F, Le, Ld, B] : std::vector<std::array<std::size_t, 7>>{
             {24, 8, 2, 16, 2, 2, 8}, {500, 32, 4, 64, 2, 2, 32}, {1000, 64, 8, 256, 3, 1, 16}}) {
        ModelConfig cfg;
        cfg.vocab_size = V;
        cfg.d_model = D;
        cfg.n_heads = H;
        cfg.d_ff = F;
        cfg.n_encoder_layers = Le;
        cfg.n_decoder_layers = Ld;
        cfg.rel_pos_buckets = B;
        cfg.rel_pos_max_distance = 4 * B;
        std::size_t sum = 0;
        for (const auto& t : param_layout(cfg)) {
            CHECK(t.offset == sum);
            sum += t.size;
        }
        // embedding, two bias tables, per-layer norms and matrices, two final norms
        const std::size_t enc_layer = D + 4 * D * D + D + D * F + F * D;
        const std::size_t dec_layer = 2 * (D + 4 * D * D) + D + D * F + F * D;
        const std::size_t hand = V * D + 2 * B * H + Le * enc_layer + Ld * dec_layer + 2 * D;
        CHECK(sum == hand);
        CHECK(parameter_count(cfg) == hand);
        CHECK(ParamStore<float>(cfg).size() == hand);
    }
}

TEST_CASE("relative position buckets match the reference table") {
    const auto cases = load_json(fixture("oracle/relative_buckets.json"));
    REQUIRE(cases.size() == 4);
    for (const auto& c : cases) {
        const long first = c.at("first_distance").get<long>();
        const auto& want = c.at("buckets");
        for (std::size_t i = 0; i < want.size(); ++i) {
            CHECK(relative_position_bucket(first + static_cast<long>(i), c.at("num_buckets").get<std::size_t>(),
                                           c.at("max_distance").get<std::size_t>(), c.at("bidirectional").get<bool>()) ==
                  want[i].get<int>());
        }
    }
}

TEST_CASE("init is deterministic and follows the scale rules") {
    const auto cfg = toy_config();
    auto a = init_params<double>(cfg, 3);
    auto b = init_params<double>(cfg, 3);
    auto c = init_params<double>(cfg, 4);
    CHECK(a == b);
    CHECK_FALSE(a == c);
    for (double g : a.tensor("encoder.layer.0.attn.norm")) CHECK(g == 1.0);
    for (double g : a.tensor("decoder.final_norm")) CHECK(g == 1.0);
    // sample stddev of the embedding is near 1, of [D, F] near 1/sqrt(D)
    auto sd = [](std::span<const double> v) {
        double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        double s = 0;
        for (double x : v) s += (x - m) * (x - m);
        return std::sqrt(s / static_cast<double>(v.size()));
    };
    ModelConfig big = cfg;
    big.vocab_size = 2000;
    big.d_model = 64;
    big.d_ff = 256;
    big.n_heads = 4;
    auto p = init_params<double>(big, 1);
    CHECK(sd(p.tensor("shared.embedding")) == doctest::Approx(1.0).epsilon(0.02));
    CHECK(sd(p.tensor("encoder.layer.0.ff.wi")) == doctest::Approx(1.0 / 8.0).epsilon(0.02));
    CHECK(sd(p.tensor("encoder.layer.0.ff.wo")) == doctest::Approx(1.0 / 16.0).epsilon(0.02));
    CHECK(sd(p.tensor("encoder.rel_bias")) == doctest::Approx(0.1).epsilon(0.25));
}

TEST_CASE("make_batch shifts targets and pads") {
    std::vector<SequencePair> pairs{{{5, 6, 7}, {8, 1}}, {{9}, {10, 11, 1}}};
    const Batch b = make_batch(pairs);
    CHECK(b.rows == 2);
    CHECK(b.enc_len == 3);
    CHECK(b.dec_len == 3);
    CHECK(b.encoder_input_ids == std::vector<TokenId>{5, 6, 7, 9, 0, 0});
    CHECK(b.encoder_mask == std::vector<std::uint8_t>{1, 1, 1, 1, 0, 0});
    CHECK(b.decoder_input_ids == std::vector<TokenId>{0, 8, 1, 0, 10, 11});
    CHECK(b.target_ids == std::vector<TokenId>{8, 1, 0, 10, 11, 1});
    CHECK(b.target_mask == std::vector<std::uint8_t>{1, 1, 0, 1, 1, 1});
    CHECK(b.loss_tokens() == 5);
}

TEST_CASE("forward agrees with a naive reference") {
    const auto cfg = small_config();
    const auto params = init_params<double>(cfg, 11);
    const auto pairs = random_pairs(cfg, 5, 4, 9, 7);
    const Batch b = make_batch(pairs);
    const auto got = forward(params, cfg, b);
    REQUIRE(got.size() == b.rows * b.dec_len * cfg.vocab_size);
    const Reference ref{cfg, params};
    double worst = 0;
    for (std::size_t r = 0; r < b.rows; ++r) {
        std::vector<TokenId> enc(b.encoder_input_ids.begin() + static_cast<long>(r * b.enc_len),
                                 b.encoder_input_ids.begin() + static_cast<long>((r + 1) * b.enc_len));
        std::vector<std::uint8_t> ok(b.encoder_mask.begin() + static_cast<long>(r * b.enc_len),
                                     b.encoder_mask.begin() + static_cast<long>((r + 1) * b.enc_len));
        std::vector<TokenId> dec(b.decoder_input_ids.begin() + static_cast<long>(r * b.dec_len),
                                 b.decoder_input_ids.begin() + static_cast<long>((r + 1) * b.dec_len));
        const Mat lg = ref.logits(enc, ok, dec);
        for (std::size_t i = 0; i < b.dec_len; ++i)
            for (std::size_t v = 0; v < cfg.vocab_size; ++v)
                worst = std::max(worst, std::abs(lg[i][v] - got[(r * b.dec_len + i) * cfg.vocab_size + v]));
    }
    CHECK(worst < 1e-10);

    // loss() is the token-mean cross-entropy of those logits
    double total = 0;
    for (std::size_t r = 0; r < b.rows; ++r)
        for (std::size_t i = 0; i < b.dec_len; ++i) {
            if (!b.target_mask[r * b.dec_len + i]) continue;
            const double* row = got.data() + (r * b.dec_len + i) * cfg.vocab_size;
            double z = 0;
            for (std::size_t v = 0; v < cfg.vocab_size; ++v) z += std::exp(row[v]);
            total += std::log(z) - row[b.target_ids[r * b.dec_len + i]];
        }
    CHECK(loss(params, cfg, b) == doctest::Approx(total / static_cast<double>(b.loss_tokens())).epsilon(1e-12));
}

TEST_CASE("gradients match central differences") {
    const auto cfg = toy_config();
    const auto params = init_params<double>(cfg, 21);
    const Batch b = make_batch(random_pairs(cfg, 8, 3, 7, 6));
    const auto res = gradient_check(cfg, params, b);
    INFO("worst tensor " << res.worst_tensor);
    CHECK(res.elements == parameter_count(cfg));
    CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("gradients from loss_and_grads agree with loss") {
    const auto cfg = toy_config();
    const auto params = init_params<double>(cfg, 2);
    const Batch b = make_batch(random_pairs(cfg, 3, 5, 10, 8));
    const auto lg = loss_and_grads(params, cfg, b);
    CHECK(lg.loss == doctest::Approx(loss(params, cfg, b)).epsilon(1e-12));
    CHECK(lg.tokens == b.loss_tokens());
    CHECK(lg.grads.all_finite());
}

TEST_CASE("uniform logits give ln(vocab)") {
    for (std::size_t V : {24, 100, 1000}) {
        auto cfg = toy_config();
        cfg.vocab_size = V;
        const Batch b = make_batch(random_pairs(cfg, V, 4, 8, 8));
        CHECK(std::abs(uniform_loss(cfg, 9, b) - std::log(static_cast<double>(V))) < 1e-6);
    }
}

TEST_CASE("decoder is causal") {
    const auto cfg = toy_config();
    const auto params = init_params<double>(cfg, 4);
    auto pairs = random_pairs(cfg, 12, 1, 8, 12);
    while (pairs[0].target.size() < 6) pairs[0].target.insert(pairs[0].target.begin(), 5);
    const Batch a = make_batch(pairs);
    Batch b = a;
    const std::size_t cut = 3;
    for (std::size_t i = cut; i < b.dec_len; ++i) b.decoder_input_ids[i] = static_cast<TokenId>(3 + (i * 7) % 20);
    const auto la = forward(params, cfg, a);
    const auto lb = forward(params, cfg, b);
    const std::size_t V = cfg.vocab_size;
    for (std::size_t i = 0; i < cut * V; ++i) CHECK(la[i] == lb[i]);
    bool later_changed = false;
    for (std::size_t i = cut * V; i < la.size(); ++i) later_changed |= la[i] != lb[i];
    CHECK(later_changed);
}

TEST_CASE("padding does not change the loss") {
    const auto cfg = toy_config();
    const auto params = init_params<double>(cfg, 6);
    const auto pairs = random_pairs(cfg, 14, 3, 6, 5);
    const double base = loss(params, cfg, make_batch(pairs));
    // A longer partner row forces extra padding on the others.
    auto padded = pairs;
    SequencePair longer;
    longer.input.assign(20, 5);
    longer.target.assign(15, 6);
    longer.target.push_back(Vocabulary::eos_id);
    padded.push_back(longer);
    const Batch pb = make_batch(padded);
    const auto logits_a = forward(params, cfg, make_batch(pairs));
    const auto logits_b = forward(params, cfg, pb);
    const std::size_t V = cfg.vocab_size;
    const Batch ab = make_batch(pairs);
    for (std::size_t r = 0; r < pairs.size(); ++r)
        for (std::size_t i = 0; i < pairs[r].target.size(); ++i)
            for (std::size_t v = 0; v < V; ++v)
                CHECK(logits_a[(r * ab.dec_len + i) * V + v] ==
                      doctest::Approx(logits_b[(r * pb.dec_len + i) * V + v]).epsilon(1e-12));
    // loss over the original rows alone is unchanged by batching them one at a time
    double sum = 0;
    std::size_t tokens = 0;
    for (const auto& p : pairs) {
        const Batch one = make_batch(std::span(&p, 1));
        sum += loss(params, cfg, one) * static_cast<double>(one.loss_tokens());
        tokens += one.loss_tokens();
    }
    CHECK(base == doctest::Approx(sum / static_cast<double>(tokens)).epsilon(1e-12));
}

TEST_CASE("duplicated rows leave the loss unchanged") {
    const auto cfg = toy_config();
    const auto params = init_params<double>(cfg, 7);
    const auto pairs = random_pairs(cfg, 15, 4, 6, 5);
    auto doubled = pairs;
    doubled.insert(doubled.end(), pairs.begin(), pairs.end());
    CHECK(loss(params, cfg, make_batch(doubled)) == doctest::Approx(loss(params, cfg, make_batch(pairs))).epsilon(1e-12));
}

TEST_CASE("float and double forward agree; kernel backends agree") {
    const auto cfg = toy_config();
    const auto pd = init_params<double>(cfg, 8);
    const auto pf = init_params<float>(cfg, 8);
    const Batch b = make_batch(random_pairs(cfg, 16, 4, 10, 8));
    const double ld = loss(pd, cfg, b);
    CHECK(loss(pf, cfg, b) == doctest::Approx(ld).epsilon(1e-4));

    const auto saved = kernels::active_backend();
    std::vector<double> losses;
    std::vector<std::vector<float>> grads;
    for (auto be : kernels::supported_backends()) {
        kernels::set_backend(be);
        const auto lg = loss_and_grads(pf, cfg, b);
        losses.push_back(lg.loss);
        grads.emplace_back(lg.grads.values().begin(), lg.grads.values().end());
        CHECK(loss(pd, cfg, b) == doctest::Approx(ld).epsilon(1e-12));
    }
    kernels::set_backend(saved);
    for (std::size_t i = 1; i < losses.size(); ++i) {
        CHECK(losses[i] == doctest::Approx(losses[0]).epsilon(1e-5));
        double num = 0, den = 0;
        for (std::size_t k = 0; k < grads[0].size(); ++k) {
            num += std::pow(double(grads[i][k]) - grads[0][k], 2);
            den += std::pow(double(grads[0][k]), 2);
        }
        CHECK(std::sqrt(num / den) < 1e-4);
    }
}

TEST_CASE("numeric and shape errors are structured") {
    const auto cfg = toy_config();
    auto params = init_params<double>(cfg, 1);
    const Batch b = make_batch(random_pairs(cfg, 17, 2, 5, 5));
    params.tensor("decoder.final_norm")[0] = std::numeric_limits<double>::infinity();
    try {
        (void)loss(params, cfg, b);
        FAIL("expected a numeric error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::numeric);
    }
    params = init_params<double>(cfg, 1);
    params.tensor("shared.embedding")[3] = std::nan("");
    CHECK_THROWS_AS((void)forward(params, cfg, b), Error);

    params = init_params<double>(cfg, 1);
    Batch empty = b;
    std::fill(empty.target_mask.begin(), empty.target_mask.end(), 0);
    try {
        (void)loss_and_grads(params, cfg, empty);
        FAIL("expected a data error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::data);
    }
    Batch bad = b;
    bad.encoder_input_ids[0] = static_cast<TokenId>(cfg.vocab_size);
    CHECK_THROWS_AS((void)loss(params, cfg, bad), Error);
    Batch shape = b;
    shape.target_ids.pop_back();
    CHECK_THROWS_AS((void)loss(params, cfg, shape), Error);

    ModelConfig c2 = cfg;
    c2.n_heads = 3;
    CHECK_THROWS_AS(c2.validate(), Error);
    c2 = cfg;
    c2.rel_pos_max_distance = 4;
    CHECK_THROWS_AS(c2.validate(), Error);
}

TEST_CASE("greedy decoding") {
    auto cfg = toy_config();
    auto params = init_params<double>(cfg, 5);
    const std::vector<TokenId> input{5, 6, 7};
    CHECK(greedy_decode(params, cfg, input, 0).empty());
    const auto out = greedy_decode(params, cfg, input, 10);
    CHECK(!out.empty());
    CHECK(out.size() <= 10);
    for (std::size_t i = 0; i + 1 < out.size(); ++i) CHECK(out[i] != Vocabulary::eos_id);
    CHECK(greedy_decode(params, cfg, input, 10) == out);

    // Step-by-step argmax over forward() agrees with the incremental decoder.
    std::vector<TokenId> prefix;
    for (TokenId want : out) {
        SequencePair p{input, prefix};
        p.target.push_back(Vocabulary::eos_id);  // placeholder for the step being predicted
        const Batch b = make_batch(std::span(&p, 1));
        const auto lg = forward(params, cfg, b);
        const double* row = lg.data() + prefix.size() * cfg.vocab_size;
        const auto best = static_cast<TokenId>(std::max_element(row, row + cfg.vocab_size) - row);
        CHECK(best == want);
        prefix.push_back(want);
    }

    // All-zero logits: ties go to the lowest id (pad), never eos.
    std::fill(params.tensor("decoder.final_norm").begin(), params.tensor("decoder.final_norm").end(), 0.0);
    CHECK(greedy_decode(params, cfg, input, 4) == TokenSequence(4, Vocabulary::pad_id));
    CHECK_THROWS_AS((void)greedy_decode(params, cfg, std::vector<TokenId>{99}, 4), Error);
}
