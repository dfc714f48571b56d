#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "revblind/checkpoint.hpp"
#include "revblind/gradcheck.hpp"
#include "revblind/layers.hpp"
#include "revblind/optim.hpp"
#include "revblind/rng.hpp"

using namespace revblind;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed,
                     Precision prec = Precision::check64) {
    Tensor t(std::move(shape), prec);
    Rng rng(seed);
    for (double& x : t.v) x = rng.normal();
    apply_precision(t);
    return t;
}

// Straightforward quadruple-loop convolution used as the oracle.
Tensor naive_conv2d(const Tensor& x, const Param& w, const Param& b, std::size_t cout,
                    std::size_t k, std::size_t s, std::size_t p) {
    const std::size_t n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3];
    const std::size_t ho = (h + 2 * p - k) / s + 1, wo = (wd + 2 * p - k) / s + 1;
    Tensor y({n, cout, ho, wo}, Precision::check64);
    for (std::size_t nn = 0; nn < n; ++nn)
        for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t oh = 0; oh < ho; ++oh)
                for (std::size_t ow = 0; ow < wo; ++ow) {
                    double acc = b.value.v[co];
                    for (std::size_t c = 0; c < cin; ++c)
                        for (std::size_t i = 0; i < k; ++i)
                            for (std::size_t j = 0; j < k; ++j) {
                                const std::ptrdiff_t ih =
                                    static_cast<std::ptrdiff_t>(oh * s + i) - static_cast<std::ptrdiff_t>(p);
                                const std::ptrdiff_t iw =
                                    static_cast<std::ptrdiff_t>(ow * s + j) - static_cast<std::ptrdiff_t>(p);
                                if (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(h) ||
                                    iw >= static_cast<std::ptrdiff_t>(wd))
                                    continue;
                                acc += x.v[((nn * cin + c) * h + static_cast<std::size_t>(ih)) * wd +
                                           static_cast<std::size_t>(iw)] *
                                       w.value.v[co * cin * k * k + (c * k + i) * k + j];
                            }
                    y.v[((nn * cout + co) * ho + oh) * wo + ow] = acc;
                }
    return y;
}

Tensor naive_conv_transpose2d(const Tensor& x, const Param& w, const Param& b, std::size_t cout,
                              std::size_t k, std::size_t s, std::size_t p) {
    const std::size_t n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3];
    const std::size_t ho = (h - 1) * s + k - 2 * p, wo = (wd - 1) * s + k - 2 * p;
    Tensor y({n, cout, ho, wo}, Precision::check64);
    for (std::size_t nn = 0; nn < n; ++nn)
        for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t i = 0; i < ho * wo; ++i)
                y.v[(nn * cout + co) * ho * wo + i] = b.value.v[co];
    for (std::size_t nn = 0; nn < n; ++nn)
        for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t hh = 0; hh < h; ++hh)
                for (std::size_t ww = 0; ww < wd; ++ww)
                    for (std::size_t co = 0; co < cout; ++co)
                        for (std::size_t i = 0; i < k; ++i)
                            for (std::size_t j = 0; j < k; ++j) {
                                const std::ptrdiff_t oh =
                                    static_cast<std::ptrdiff_t>(hh * s + i) - static_cast<std::ptrdiff_t>(p);
                                const std::ptrdiff_t ow =
                                    static_cast<std::ptrdiff_t>(ww * s + j) - static_cast<std::ptrdiff_t>(p);
                                if (oh < 0 || ow < 0 || oh >= static_cast<std::ptrdiff_t>(ho) ||
                                    ow >= static_cast<std::ptrdiff_t>(wo))
                                    continue;
                                y.v[((nn * cout + co) * ho + static_cast<std::size_t>(oh)) * wo +
                                    static_cast<std::size_t>(ow)] +=
                                    x.v[((nn * cin + c) * h + hh) * wd + ww] *
                                    w.value.v[c * cout * k * k + (co * k + i) * k + j];
                            }
    return y;
}

} // namespace

TEST_CASE("dense layer with identity weights passes input through") {
    Dense d("d", 3, 3);
    d.set_precision(Precision::check64);
    d.init(1);
    std::fill(d.w.value.v.begin(), d.w.value.v.end(), 0.0);
    for (std::size_t i = 0; i < 3; ++i) d.w.value.v[i * 3 + i] = 1.0;
    std::fill(d.b.value.v.begin(), d.b.value.v.end(), 0.0);

    const Tensor x = random_tensor({4, 3}, 10);
    const Tensor y = d.forward(x, false);
    REQUIRE(y.shape == x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.v[i] == doctest::Approx(x.v[i]).epsilon(1e-15));
}

TEST_CASE("one-by-one convolution scales elementwise") {
    Conv2d c("c", 1, 1, 1, 1, 0);
    c.set_precision(Precision::check64);
    c.init(2);
    c.w.value.v[0] = -2.5;
    c.b.value.v[0] = 0.0;

    const Tensor x = random_tensor({2, 1, 3, 4}, 11);
    const Tensor y = c.forward(x, false);
    REQUIRE(y.shape == x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(y.v[i] == doctest::Approx(-2.5 * x.v[i]).epsilon(1e-12));
    }
}

TEST_CASE("convolution matches the naive oracle") {
    struct Case {
        std::size_t cin, cout, k, s, p, h, w;
    };
    const Case cases[] = {{1, 2, 3, 2, 1, 8, 9}, {3, 2, 3, 1, 1, 5, 6}, {2, 4, 1, 1, 0, 4, 4},
                          {2, 3, 3, 2, 1, 16, 17}};
    for (const Case& cs : cases) {
        CAPTURE(cs.k);
        CAPTURE(cs.s);
        Conv2d c("c", cs.cin, cs.cout, cs.k, cs.s, cs.p);
        c.set_precision(Precision::check64);
        c.init(3);
        const Tensor x = random_tensor({2, cs.cin, cs.h, cs.w}, 12);
        const Tensor got = c.forward(x, false);
        const Tensor want = naive_conv2d(x, c.w, c.b, cs.cout, cs.k, cs.s, cs.p);
        REQUIRE(got.shape == want.shape);
        for (std::size_t i = 0; i < got.size(); ++i) {
            CHECK(got.v[i] == doctest::Approx(want.v[i]).epsilon(1e-11));
        }
    }
}

TEST_CASE("transposed convolution matches the naive oracle") {
    ConvTranspose2d c("ct", 3, 2, 4, 2, 1);
    c.set_precision(Precision::check64);
    c.init(4);
    const Tensor x = random_tensor({2, 3, 3, 5}, 13);
    const Tensor got = c.forward(x, false);
    const Tensor want = naive_conv_transpose2d(x, c.w, c.b, 2, 4, 2, 1);
    REQUIRE(got.shape == want.shape);
    REQUIRE(got.shape == std::vector<std::size_t>{2, 2, 6, 10});
    for (std::size_t i = 0; i < got.size(); ++i) {
        CHECK(got.v[i] == doctest::Approx(want.v[i]).epsilon(1e-11));
    }
}

TEST_CASE("stride-two shape ladder matches the architecture plan") {
    CHECK(Conv2d::out_extent(16, 3, 2, 1) == 8);
    CHECK(Conv2d::out_extent(8, 3, 2, 1) == 4);
    CHECK(Conv2d::out_extent(4, 3, 2, 1) == 2);
    CHECK(Conv2d::out_extent(2, 3, 2, 1) == 1);
    CHECK(Conv2d::out_extent(247, 3, 2, 1) == 124);
    CHECK(Conv2d::out_extent(124, 3, 2, 1) == 62);
    CHECK(Conv2d::out_extent(62, 3, 2, 1) == 31);
    CHECK(Conv2d::out_extent(31, 3, 2, 1) == 16);
    CHECK(Conv2d::out_extent(499, 3, 2, 1) == 250);
    CHECK(Conv2d::out_extent(250, 3, 2, 1) == 125);
    CHECK(Conv2d::out_extent(125, 3, 2, 1) == 63);
    CHECK(ConvTranspose2d::out_extent(1, 4, 2, 1) == 2);
    CHECK(ConvTranspose2d::out_extent(16, 4, 2, 1) == 32);
    CHECK(ConvTranspose2d::out_extent(128, 4, 2, 1) == 256);
}

TEST_CASE("uniform attention reduces to the value projection of the token mean") {
    MultiHeadSelfAttention a("a", 4, 1);
    a.set_precision(Precision::check64);
    a.init(5);
    std::fill(a.wq.value.v.begin(), a.wq.value.v.end(), 0.0);
    std::fill(a.bq.value.v.begin(), a.bq.value.v.end(), 0.0);
    std::fill(a.wk.value.v.begin(), a.wk.value.v.end(), 0.0);
    std::fill(a.bk.value.v.begin(), a.bk.value.v.end(), 0.0);
    std::fill(a.wo.value.v.begin(), a.wo.value.v.end(), 0.0);
    for (std::size_t i = 0; i < 4; ++i) a.wo.value.v[i * 4 + i] = 1.0;
    std::fill(a.bo.value.v.begin(), a.bo.value.v.end(), 0.0);

    const std::size_t t = 5;
    const Tensor x = random_tensor({1, t, 4}, 14);
    const Tensor y = a.forward(x, false);

    // Expected: every token equals the value projection of the mean token.
    std::vector<double> vproj_mean(4, 0.0);
    for (std::size_t tt = 0; tt < t; ++tt) {
        for (std::size_t o = 0; o < 4; ++o) {
            double acc = 0.0;
            for (std::size_t i = 0; i < 4; ++i) acc += a.wv.value.v[o * 4 + i] * x.v[tt * 4 + i];
            vproj_mean[o] += (acc + a.bv.value.v[o]) / static_cast<double>(t);
        }
    }
    for (std::size_t tt = 0; tt < t; ++tt) {
        for (std::size_t o = 0; o < 4; ++o) {
            CHECK(y.v[tt * 4 + o] == doctest::Approx(vproj_mean[o]).epsilon(1e-10));
        }
    }
}

TEST_CASE("attention softmax rows sum to one") {
    MultiHeadSelfAttention a("a", 8, 2);
    a.set_precision(Precision::check64);
    a.init(6);
    a.keep_attention = true;
    const Tensor x = random_tensor({2, 7, 8}, 15);
    a.forward(x, false);
    REQUIRE(a.last_attention.size() == 2 * 2 * 7 * 7);
    for (std::size_t r = 0; r < 2 * 2 * 7; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < 7; ++c) sum += a.last_attention[r * 7 + c];
        CHECK(std::fabs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("sum-loss gradient of a dense layer is the outer product with the input") {
    Dense d("d", 3, 2);
    d.set_precision(Precision::check64);
    d.init(7);
    const Tensor x = random_tensor({1, 3}, 16);
    d.forward(x, true);
    Tensor ones({1, 2}, Precision::check64);
    std::fill(ones.v.begin(), ones.v.end(), 1.0);
    d.zero_grad();
    d.backward(ones);
    // dW[o][i] = 1 * x[i] for every output row o; db = ones.
    for (std::size_t o = 0; o < 2; ++o) {
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(d.w.grad.v[o * 3 + i] == doctest::Approx(x.v[i]).epsilon(1e-14));
        }
        CHECK(d.b.grad.v[o] == doctest::Approx(1.0).epsilon(1e-14));
    }
}

TEST_CASE("zero output gradient produces zero parameter gradients") {
    auto stack = std::make_unique<Sequential>("s");
    stack->add<Dense>("s.fc1", 4, 6);
    stack->add<Gelu>("s.act");
    stack->add<Dense>("s.fc2", 6, 2);
    stack->set_precision(Precision::check64);
    stack->init(8);
    const Tensor x = random_tensor({3, 4}, 17);
    stack->forward(x, true);
    stack->zero_grad();
    Tensor zero({3, 2}, Precision::check64);
    stack->backward(zero);
    for (Param* p : stack->params()) {
        for (double g : p->grad.v) CHECK(g == 0.0);
    }
}

TEST_CASE("gradient check: single dense layer is tight") {
    Dense d("d", 6, 4);
    d.set_precision(Precision::check64);
    d.init(9);
    const Tensor x = random_tensor({3, 6}, 18);
    const GradCheckResult r = grad_check(d, x);
    CAPTURE(r.worst_param);
    CHECK(r.max_rel_err < 1e-7);
    CHECK(r.checked == 6 * 4 + 4);
}

TEST_CASE("gradient check: purely linear stack is exact to roundoff") {
    Sequential s("lin");
    s.add<Dense>("lin.fc1", 5, 7);
    s.add<Dense>("lin.fc2", 7, 3);
    s.set_precision(Precision::check64);
    s.init(10);
    const Tensor x = random_tensor({2, 5}, 19);
    const GradCheckResult r = grad_check(s, x);
    CAPTURE(r.worst_param);
    CHECK(r.max_rel_err < 1e-8);
}

TEST_CASE("gradient check: conv, norm and attention stack") {
    Sequential s("mix");
    s.add<Conv2d>("mix.conv", 1, 4, 3, 2, 1);
    s.add<ReLU>("mix.relu");
    s.add<TokensFromFeatureMap>("mix.tok");
    s.add<LayerNorm>("mix.norm", 16);
    s.add<MultiHeadSelfAttention>("mix.attn", 16, 2);
    s.add<TokenMeanPool>("mix.pool");
    s.add<Dense>("mix.head", 16, 3);
    s.set_precision(Precision::check64);
    s.init(11);
    const Tensor x = random_tensor({2, 1, 8, 9}, 20);
    const GradCheckResult r = grad_check(s, x);
    CAPTURE(r.worst_param);
    CHECK(r.max_rel_err < 1e-5);
}

TEST_CASE("gradient check: every layer kind in a property sweep") {
    SUBCASE("conv variants") {
        struct Case {
            std::size_t cin, cout, k, s, p;
        };
        const Case cases[] = {{2, 3, 3, 1, 1}, {3, 2, 1, 1, 0}, {2, 2, 3, 2, 1}};
        std::uint64_t seed = 21;
        for (const Case& cs : cases) {
            const std::size_t fo = Conv2d::out_extent(4, cs.k, cs.s, cs.p);
            Sequential s("c");
            s.add<Conv2d>("c.conv", cs.cin, cs.cout, cs.k, cs.s, cs.p);
            s.add<PoolTimeFlatten>("c.pool");
            s.add<Dense>("c.head", cs.cout * fo, 2);
            s.set_precision(Precision::check64);
            s.init(seed);
            const Tensor x = random_tensor({2, cs.cin, 4, 5}, seed + 100);
            const GradCheckResult r = grad_check(s, x);
            CAPTURE(seed);
            CAPTURE(r.worst_param);
            CHECK(r.max_rel_err < 1e-6);
            ++seed;
        }
    }
    SUBCASE("decoder-style stack") {
        Sequential s("dec");
        s.add<Dense>("dec.proj", 4, 6);
        s.add<BroadcastTokens>("dec.tokens", 3, 2, 4);
        s.add<ReLU>("dec.act");
        s.add<ConvTranspose2d>("dec.up", 3, 2, 4, 2, 1);
        s.add<CropToShape>("dec.crop", 3, 7);
        s.set_precision(Precision::check64);
        s.init(24);
        const Tensor x = random_tensor({2, 4}, 124);
        const GradCheckResult r = grad_check(s, x);
        CAPTURE(r.worst_param);
        CHECK(r.max_rel_err < 1e-6);
    }
    SUBCASE("transformer block with positional encoding") {
        Sequential s("tf");
        s.add<PositionalEncoding>("tf.pos", 16, 6);
        s.add_layer(make_transformer_block("tf.block", 6, 2));
        s.add<TokenMeanPool>("tf.pool");
        s.set_precision(Precision::check64);
        s.init(25);
        const Tensor x = random_tensor({2, 4, 6}, 125);
        const GradCheckResult r = grad_check(s, x);
        CAPTURE(r.worst_param);
        CHECK(r.max_rel_err < 1e-5);
    }
    SUBCASE("layer norm alone") {
        LayerNorm ln("ln", 6);
        ln.set_precision(Precision::check64);
        ln.init(26);
        const Tensor x = random_tensor({5, 6}, 126);
        const GradCheckResult r = grad_check(ln, x);
        CAPTURE(r.worst_param);
        CHECK(r.max_rel_err < 1e-6);
    }
}

TEST_CASE("forward is deterministic and bit-identical") {
    Sequential s("det");
    s.add<Conv2d>("det.conv", 1, 3, 3, 2, 1);
    s.add<ReLU>("det.act");
    s.add<TokensFromFeatureMap>("det.tok");
    s.add<LayerNorm>("det.norm", 6);
    s.init(27);
    const Tensor x = random_tensor({2, 1, 4, 6}, 127, Precision::train32);
    const Tensor y1 = s.forward(x, false);
    const Tensor y2 = s.forward(x, false);
    CHECK(y1.v == y2.v);

    Sequential s2("det");
    s2.add<Conv2d>("det.conv", 1, 3, 3, 2, 1);
    s2.add<ReLU>("det.act");
    s2.add<TokensFromFeatureMap>("det.tok");
    s2.add<LayerNorm>("det.norm", 6);
    s2.init(27);
    const Tensor y3 = s2.forward(x, false);
    CHECK(y1.v == y3.v);
}

TEST_CASE("train32 keeps every stored value on the float grid") {
    Dense d("d", 8, 8);
    d.init(28);
    const Tensor x = random_tensor({4, 8}, 128, Precision::train32);
    const Tensor y = d.forward(x, false);
    for (double vy : y.v) CHECK(static_cast<double>(static_cast<float>(vy)) == vy);
    for (double vw : d.w.value.v) CHECK(static_cast<double>(static_cast<float>(vw)) == vw);
}

TEST_CASE("non-finite activations are rejected") {
    Dense d("d", 2, 2);
    d.init(29);
    Tensor x({1, 2}, Precision::train32);
    x.v[0] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(d.forward(x, false), NumericalError);
}

TEST_CASE("shape mismatches are rejected") {
    Dense d("d", 3, 2);
    d.init(30);
    CHECK_THROWS_AS(d.forward(random_tensor({2, 4}, 130, Precision::train32), false), ValueError);

    Conv2d c("c", 2, 2, 3, 2, 1);
    c.init(31);
    CHECK_THROWS_AS(c.forward(random_tensor({1, 3, 4, 4}, 131, Precision::train32), false),
                    ValueError);

    CHECK_THROWS_AS(MultiHeadSelfAttention("a", 10, 3), ValueError);
}

TEST_CASE("adam first step approximates a signed step") {
    Dense d("d", 2, 2);
    d.init(32);
    const Tensor before = d.w.value;
    Adam opt(d.params(), AdamConfig{});
    for (std::size_t i = 0; i < d.w.grad.size(); ++i) {
        d.w.grad.v[i] = (i % 2 == 0) ? 0.3 : -0.2;
    }
    std::fill(d.b.grad.v.begin(), d.b.grad.v.end(), 0.0);
    opt.step();
    for (std::size_t i = 0; i < before.size(); ++i) {
        const double expected = before.v[i] - 1e-3 * ((i % 2 == 0) ? 1.0 : -1.0);
        CHECK(std::fabs(d.w.value.v[i] - expected) < 1e-6);
    }
}

TEST_CASE("adam leaves parameters alone under zero gradients") {
    Dense d("d", 3, 3);
    d.init(33);
    const Tensor before = d.w.value;
    Adam opt(d.params(), AdamConfig{});
    opt.zero_grad();
    opt.step();
    CHECK(d.w.value.v == before.v);
}

TEST_CASE("two optimizers with identical inputs follow identical trajectories") {
    auto build = [] {
        auto d = std::make_unique<Dense>("d", 4, 4);
        d->init(34);
        return d;
    };
    auto a = build();
    auto b = build();
    Adam oa(a->params(), AdamConfig{});
    Adam ob(b->params(), AdamConfig{});
    Rng rng(35);
    for (int step = 0; step < 100; ++step) {
        std::vector<double> g(a->w.grad.size());
        for (double& x : g) x = rng.normal();
        a->w.grad.v = g;
        b->w.grad.v = g;
        oa.step();
        ob.step();
    }
    CHECK(a->w.value.v == b->w.value.v);
    CHECK(a->b.value.v == b->b.value.v);
}

TEST_CASE("checkpoints round-trip parameters, meta and hash") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "revblind_ckpt_test.bin";

    auto build = [](std::uint64_t seed) {
        auto s = std::make_unique<Sequential>("m");
        s->add<Dense>("m.fc1", 5, 7);
        s->add<LayerNorm>("m.norm", 7);
        s->add<Dense>("m.fc2", 7, 2);
        s->init(seed);
        return s;
    };

    auto src = build(36);
    nlohmann::json meta;
    meta["kind"] = "unit-test";
    meta["dim"] = 7;
    save_checkpoint(path.string(), src->params(), meta);

    auto dst = build(37);
    CHECK(params_hash(dst->params()) != params_hash(src->params()));
    const nlohmann::json loaded_meta = load_checkpoint(path.string(), dst->params());
    CHECK(loaded_meta["kind"] == "unit-test");
    CHECK(loaded_meta["dim"] == 7);
    CHECK(params_hash(dst->params()) == params_hash(src->params()));
    auto sp = src->params();
    auto dp = dst->params();
    for (std::size_t i = 0; i < sp.size(); ++i) CHECK(sp[i]->value.v == dp[i]->value.v);

    CHECK(read_checkpoint_meta(path.string())["kind"] == "unit-test");

    SUBCASE("architecture mismatch is rejected") {
        Sequential other("m");
        other.add<Dense>("m.fc1", 5, 6);
        other.init(38);
        CHECK_THROWS_AS(load_checkpoint(path.string(), other.params()), IoError);
    }

    SUBCASE("corruption is detected") {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(-9, std::ios::end); // inside the blob, before the hash
        char byte = 0;
        f.read(&byte, 1);
        f.seekp(-9, std::ios::end);
        byte = static_cast<char>(byte ^ 0x40);
        f.write(&byte, 1);
        f.close();
        auto fresh = build(39);
        CHECK_THROWS_AS(load_checkpoint(path.string(), fresh->params()), IoError);
    }

    fs::remove(path);
}
