#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "transop/gradcheck.hpp"
#include "transop/nn.hpp"
#include "transop/rng.hpp"

using namespace transop;

namespace {

Tensor random_tensor(Rng& rng, Shape s, double scale = 1.0) {
    Tensor t(std::move(s));
    for (size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * scale;
    return t;
}

void check_layer_grad(Rng& rng, const std::function<Tensor(Tape*)>& fwd, std::vector<Tensor*> params,
                      double tol = 1e-6) {
    Tape tape;
    for (Tensor* t : params) t->requires_grad = true;
    Tensor out = fwd(&tape);
    Tensor w = random_tensor(rng, out.shape);
    Tensor loss = sum_all(mul(out, w, &tape), &tape);
    tape.backward(loss);
    auto eval = [&]() {
        Tensor o = fwd(nullptr);
        double s = 0.0;
        for (size_t i = 0; i < o.size(); ++i) s += o[i] * w[i];
        return s;
    };
    for (Tensor* t : params) {
        std::vector<double> fd = fd_grad(eval, *t, 1e-6);
        INFO("param shape " << shape_str(t->shape));
        REQUIRE(max_rel_err(tape.grad(*t), fd) < tol);
    }
}

// Naive attention (explicit loops), optionally adding `shift` to the
// pre-softmax logits of one query row of every head.
Tensor ref_mhsa(const Tensor& x, const MHSAParams& p, int shift_query = -1, double shift = 0.0,
                std::vector<double>* row_sums = nullptr) {
    const int B = x.shape[0], T = x.shape[1], K = x.shape[2];
    const int H = p.heads, hd = K / H;
    auto matvec = [&](const Tensor& w, const double* in, double* out_vec) {
        for (int j = 0; j < K; ++j) {
            double s = 0.0;
            for (int i = 0; i < K; ++i) s += in[i] * w[static_cast<size_t>(i) * K + j];
            out_vec[j] = s;
        }
    };
    std::vector<double> q(static_cast<size_t>(B) * T * K), k(q.size()), v(q.size());
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t) {
            const double* row = x.data() + (static_cast<size_t>(b) * T + t) * K;
            matvec(p.wq, row, q.data() + (static_cast<size_t>(b) * T + t) * K);
            matvec(p.wk, row, k.data() + (static_cast<size_t>(b) * T + t) * K);
            matvec(p.wv, row, v.data() + (static_cast<size_t>(b) * T + t) * K);
        }
    Tensor out({B, T, K});
    std::vector<double> merged(static_cast<size_t>(K));
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < H; ++h)
            for (int tq = 0; tq < T; ++tq) {
                std::vector<double> logits(static_cast<size_t>(T));
                for (int tk = 0; tk < T; ++tk) {
                    double s = 0.0;
                    for (int j = 0; j < hd; ++j)
                        s += q[(static_cast<size_t>(b) * T + tq) * K + h * hd + j] *
                             k[(static_cast<size_t>(b) * T + tk) * K + h * hd + j];
                    logits[static_cast<size_t>(tk)] = s / std::sqrt(double(hd));
                    if (tq == shift_query) logits[static_cast<size_t>(tk)] += shift;
                }
                double mx = *std::max_element(logits.begin(), logits.end());
                double z = 0.0;
                for (double& l : logits) {
                    l = std::exp(l - mx);
                    z += l;
                }
                double sum = 0.0;
                for (double& l : logits) {
                    l /= z;
                    sum += l;
                }
                if (row_sums) row_sums->push_back(sum);
                for (int j = 0; j < hd; ++j) {
                    double s = 0.0;
                    for (int tk = 0; tk < T; ++tk)
                        s += logits[static_cast<size_t>(tk)] *
                             v[(static_cast<size_t>(b) * T + tk) * K + h * hd + j];
                    merged[static_cast<size_t>(h * hd + j)] = s;
                }
                // merged holds only head h's slice; write through after wo below
                for (int j = 0; j < hd; ++j)
                    out[(static_cast<size_t>(b) * T + tq) * K + h * hd + j] = merged[static_cast<size_t>(h * hd + j)];
            }
    // project merged heads by wo
    Tensor proj({B, T, K});
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t)
            matvec(p.wo, out.data() + (static_cast<size_t>(b) * T + t) * K,
                   proj.data() + (static_cast<size_t>(b) * T + t) * K);
    return proj;
}

MHSAParams random_mhsa(Rng& rng, int K, int heads) {
    MHSAParams p;
    p.wq = random_tensor(rng, {K, K}, 0.3);
    p.wk = random_tensor(rng, {K, K}, 0.3);
    p.wv = random_tensor(rng, {K, K}, 0.3);
    p.wo = random_tensor(rng, {K, K}, 0.3);
    p.heads = heads;
    return p;
}

} // namespace

TEST_CASE("linear identity and bias") {
    LinearParams p;
    p.W = Tensor({3, 3});
    for (int i = 0; i < 3; ++i) p.W[static_cast<size_t>(i) * 3 + i] = 1.0;
    p.b = Tensor({3});
    Rng rng(1);
    Tensor x = random_tensor(rng, {4, 3});
    Tensor y = linear(x, p);
    for (size_t i = 0; i < x.size(); ++i) REQUIRE(y[i] == x[i]);

    p.b = Tensor({3}, {1.0, -2.0, 0.5});
    Tensor zeros({2, 3});
    Tensor yb = linear(zeros, p);
    for (int r = 0; r < 2; ++r) {
        REQUIRE(yb[static_cast<size_t>(r) * 3 + 0] == 1.0);
        REQUIRE(yb[static_cast<size_t>(r) * 3 + 1] == -2.0);
        REQUIRE(yb[static_cast<size_t>(r) * 3 + 2] == 0.5);
    }

    REQUIRE_THROWS_AS(linear(Tensor({2, 4}), p), DimensionError);
}

TEST_CASE("linear matches a naive dot-product oracle") {
    Rng rng(2);
    LinearParams p;
    p.W = random_tensor(rng, {5, 3});
    p.b = random_tensor(rng, {3});
    Tensor x = random_tensor(rng, {4, 5});
    Tensor y = linear(x, p);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 3; ++c) {
            double s = p.b[static_cast<size_t>(c)];
            for (int i = 0; i < 5; ++i)
                s += x[static_cast<size_t>(r) * 5 + i] * p.W[static_cast<size_t>(i) * 3 + c];
            REQUIRE(std::fabs(y[static_cast<size_t>(r) * 3 + c] - s) < 1e-12);
        }
}

TEST_CASE("layer_norm normalizes and guards degenerate variance") {
    LayerNormParams p;
    p.gamma = Tensor::full({3}, 1.0);
    p.beta = Tensor({3});
    Tensor x({1, 3}, {1.0, 2.0, 3.0});
    Tensor y = layer_norm(x, p);
    double mu = (y[0] + y[1] + y[2]) / 3.0;
    REQUIRE(std::fabs(mu) < 1e-12);
    double sd = std::sqrt((y[0] * y[0] + y[1] * y[1] + y[2] * y[2]) / 3.0);
    REQUIRE(std::fabs(sd - 1.0) < 1e-6);

    Tensor c = Tensor::full({2, 3}, 4.2);
    Tensor yc = layer_norm(c, p);
    for (size_t i = 0; i < yc.size(); ++i) REQUIRE(yc[i] == 0.0);
}

TEST_CASE("layer_norm gradient check") {
    Rng rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        LayerNormParams p;
        p.gamma = random_tensor(rng, {6});
        p.beta = random_tensor(rng, {6});
        Tensor x = random_tensor(rng, {4, 6});
        check_layer_grad(rng, [&](Tape* t) { return layer_norm(x, p, t); }, {&x, &p.gamma, &p.beta});
    }
}

TEST_CASE("mhsa with a single token reduces to the value path") {
    Rng rng(4);
    MHSAParams p = random_mhsa(rng, 6, 2);
    Tensor x = random_tensor(rng, {2, 1, 6});
    Tensor y = mhsa(x, p);
    // attention over one token is exactly 1, so out = (x Wv) Wo
    Tensor x2 = reshape(x, {2, 6});
    Tensor expect = matmul(matmul(x2, p.wv), p.wo);
    for (size_t i = 0; i < y.size(); ++i) REQUIRE(std::fabs(y[i] - expect[i]) < 1e-12);
}

TEST_CASE("mhsa attention rows sum to one and match the reference") {
    Rng rng(5);
    MHSAParams p = random_mhsa(rng, 8, 2);
    Tensor x = random_tensor(rng, {2, 5, 8});
    std::vector<double> row_sums;
    Tensor ref = ref_mhsa(x, p, -1, 0.0, &row_sums);
    for (double s : row_sums) REQUIRE(std::fabs(s - 1.0) < 1e-10);
    Tensor y = mhsa(x, p);
    for (size_t i = 0; i < y.size(); ++i) REQUIRE(std::fabs(y[i] - ref[i]) < 1e-10);
}

TEST_CASE("mhsa hand-computed two-token single-head oracle") {
    MHSAParams p;
    p.heads = 1;
    p.wq = Tensor({2, 2});
    p.wk = Tensor({2, 2});
    p.wv = Tensor({2, 2});
    p.wo = Tensor({2, 2});
    for (int i = 0; i < 2; ++i) {
        p.wq[static_cast<size_t>(i) * 2 + i] = 1.0;
        p.wk[static_cast<size_t>(i) * 2 + i] = 1.0;
        p.wv[static_cast<size_t>(i) * 2 + i] = 1.0;
        p.wo[static_cast<size_t>(i) * 2 + i] = 1.0;
    }
    Tensor x({1, 2, 2}, {1.0, 0.0, 0.0, 1.0});
    // Q=K=V=x; scores = x x^T / sqrt(2) = [[s,0],[0,s]], s = 1/sqrt(2)
    double s = 1.0 / std::sqrt(2.0);
    double p_same = std::exp(s) / (std::exp(s) + 1.0);
    double p_other = 1.0 - p_same;
    Tensor y = mhsa(x, p);
    REQUIRE(std::fabs(y[0] - p_same) < 1e-12);  // row 0: p_same*v0 + p_other*v1
    REQUIRE(std::fabs(y[1] - p_other) < 1e-12);
    REQUIRE(std::fabs(y[2] - p_other) < 1e-12);
    REQUIRE(std::fabs(y[3] - p_same) < 1e-12);
}

TEST_CASE("mhsa is invariant to shifting one query's logits") {
    Rng rng(6);
    MHSAParams p = random_mhsa(rng, 6, 3);
    Tensor x = random_tensor(rng, {1, 4, 6});
    Tensor base = ref_mhsa(x, p);
    Tensor shifted = ref_mhsa(x, p, 2, 7.5);
    for (size_t i = 0; i < base.size(); ++i) REQUIRE(std::fabs(base[i] - shifted[i]) < 1e-10);
    Tensor impl = mhsa(x, p);
    for (size_t i = 0; i < base.size(); ++i) REQUIRE(std::fabs(impl[i] - shifted[i]) < 1e-10);
}

TEST_CASE("mhsa rejects indivisible head count") {
    Rng rng(7);
    MHSAParams p = random_mhsa(rng, 6, 4);
    Tensor x = random_tensor(rng, {1, 3, 6});
    REQUIRE_THROWS_AS(mhsa(x, p), ConfigError);
}

TEST_CASE("mhsa gradient check") {
    Rng rng(8);
    MHSAParams p = random_mhsa(rng, 6, 2);
    Tensor x = random_tensor(rng, {2, 3, 6});
    check_layer_grad(rng, [&](Tape* t) { return mhsa(x, p, t); },
                     {&x, &p.wq, &p.wk, &p.wv, &p.wo});
}

TEST_CASE("mlp_block zero weights give zero output and shapes are preserved") {
    MlpParams p;
    p.fc1 = {Tensor({5, 7}), Tensor({7})};
    p.fc2 = {Tensor({7, 5}), Tensor({5})};
    Rng rng(9);
    Tensor x = random_tensor(rng, {2, 3, 5});
    Tensor y = mlp_block(x, p);
    REQUIRE(y.shape == x.shape);
    for (size_t i = 0; i < y.size(); ++i) REQUIRE(y[i] == 0.0);

    p.fc1.W = random_tensor(rng, {5, 7});
    p.fc2.W = random_tensor(rng, {7, 5});
    REQUIRE(mlp_block(x, p).shape == x.shape);
    REQUIRE(mlp_block(random_tensor(rng, {4, 5}), p).shape == Shape{4, 5});
}

TEST_CASE("mlp_block gradient check") {
    Rng rng(10);
    MlpParams p;
    p.fc1 = {random_tensor(rng, {4, 6}), random_tensor(rng, {6})};
    p.fc2 = {random_tensor(rng, {6, 4}), random_tensor(rng, {4})};
    Tensor x = random_tensor(rng, {2, 3, 4});
    check_layer_grad(rng, [&](Tape* t) { return mlp_block(x, p, t); },
                     {&x, &p.fc1.W, &p.fc1.b, &p.fc2.W, &p.fc2.b});
}

TEST_CASE("dropout contract") {
    Rng master(11);
    Tensor x = random_tensor(master, {40, 25});

    Rng r1(1);
    Tensor inf = dropout(x, 0.3, Mode::infer, &r1);
    for (size_t i = 0; i < x.size(); ++i) REQUIRE(inf[i] == x[i]); // bit-identical

    Rng r2(2);
    Tensor p0 = dropout(x, 0.0, Mode::train, &r2);
    for (size_t i = 0; i < x.size(); ++i) REQUIRE(p0[i] == x[i]);

    REQUIRE_THROWS_AS(dropout(x, 1.0, Mode::train, &r2), ConfigError);
    REQUIRE_THROWS_AS(dropout(x, -0.1, Mode::train, &r2), ConfigError);

    // seed reproducibility
    Rng ra(33), rb(33);
    Tensor a = dropout(x, 0.5, Mode::train, &ra);
    Tensor b = dropout(x, 0.5, Mode::train, &rb);
    for (size_t i = 0; i < x.size(); ++i) REQUIRE(a[i] == b[i]);
}

TEST_CASE("dropout statistics at p=0.5") {
    Tensor ones = Tensor::full({400, 250}, 1.0); // 1e5 elements
    Rng rng(77);
    Tensor y = dropout(ones, 0.5, Mode::train, &rng);
    size_t survivors = 0;
    double sum = 0.0;
    for (size_t i = 0; i < y.size(); ++i) {
        survivors += y[i] != 0.0 ? 1 : 0;
        sum += y[i];
    }
    double frac = static_cast<double>(survivors) / static_cast<double>(y.size());
    REQUIRE(frac > 0.49);
    REQUIRE(frac < 0.51);
    double mean = sum / static_cast<double>(y.size());
    REQUIRE(std::fabs(mean - 1.0) < 0.01);
}

TEST_CASE("dropout train-mode gradient flows through the mask") {
    Rng rng(12);
    Tensor x = random_tensor(rng, {6, 5});
    // fix the mask by replaying the same rng seed inside the closure
    auto fwd = [&](Tape* t) {
        Rng r(99);
        return dropout(x, 0.4, Mode::train, &r, t);
    };
    check_layer_grad(rng, fwd, {&x});
}

TEST_CASE("patch_embed token counts") {
    Rng rng(13);
    {
        // paper crop: 32x192x128 with P=16 -> 2*12*8 = 192 tokens
        PatchEmbedParams p;
        p.patch = 16;
        p.channels = 1;
        p.projection = random_tensor(rng, {16 * 16 * 16, 8}, 0.02);
        p.bias = Tensor({8});
        Volume v(32, 192, 128);
        for (double& x : v.voxels) x = 0.01;
        Tensor tokens = patch_embed(v, p);
        REQUIRE(tokens.shape == Shape{192, 8});
        REQUIRE(patch_token_count(32, 192, 128, 16) == 192);
    }
    {
        // P = D = W = H -> a single token
        PatchEmbedParams p;
        p.patch = 4;
        p.channels = 1;
        p.projection = random_tensor(rng, {64, 5}, 0.1);
        p.bias = random_tensor(rng, {5});
        Volume v(4, 4, 4);
        for (double& x : v.voxels) x = 1.0;
        REQUIRE(patch_embed(v, p).shape == Shape{1, 5});
    }
    {
        PatchEmbedParams p;
        p.patch = 8;
        p.channels = 1;
        p.projection = random_tensor(rng, {512, 4}, 0.1);
        p.bias = Tensor({4});
        Volume v(4, 16, 16);
        REQUIRE_THROWS_AS(patch_embed(v, p), InputTooSmallError);
    }
}

TEST_CASE("patch_embed equals an explicit unfold-then-matmul oracle") {
    Rng rng(14);
    const int P = 3, K = 5, D = 7, W = 6, H = 9; // trailing voxels dropped on D and W... (7/3=2, 6/3=2, 9/3=3)
    PatchEmbedParams p;
    p.patch = P;
    p.channels = 1;
    p.projection = random_tensor(rng, {P * P * P, K});
    p.bias = random_tensor(rng, {K});
    Volume v(D, W, H);
    for (double& x : v.voxels) x = rng.normal();
    Tensor got = patch_embed(v, p);
    const int ld = D / P, lw = W / P, lh = H / P;
    REQUIRE(got.shape == Shape{ld * lw * lh, K});
    int row = 0;
    for (int zd = 0; zd < ld; ++zd)
        for (int zw = 0; zw < lw; ++zw)
            for (int zh = 0; zh < lh; ++zh, ++row) {
                for (int c = 0; c < K; ++c) {
                    double s = p.bias[static_cast<size_t>(c)];
                    int col = 0;
                    for (int id = 0; id < P; ++id)
                        for (int iw = 0; iw < P; ++iw)
                            for (int ih = 0; ih < P; ++ih, ++col)
                                s += v.at(zd * P + id, zw * P + iw, zh * P + ih) *
                                     p.projection[static_cast<size_t>(col) * K + c];
                    REQUIRE(std::fabs(got[static_cast<size_t>(row) * K + c] - s) < 1e-12);
                }
            }
}

TEST_CASE("patch_embed is permutation-consistent in projection columns") {
    Rng rng(15);
    const int P = 2, K = 4;
    PatchEmbedParams p;
    p.patch = P;
    p.channels = 1;
    p.projection = random_tensor(rng, {8, K});
    p.bias = random_tensor(rng, {K});
    Volume v(4, 4, 4);
    for (double& x : v.voxels) x = rng.normal();
    Tensor base = patch_embed(v, p);

    std::vector<int> perm = {2, 0, 3, 1};
    PatchEmbedParams q = p;
    q.projection = Tensor({8, K});
    q.bias = Tensor({K});
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < K; ++c)
            q.projection[static_cast<size_t>(r) * K + perm[static_cast<size_t>(c)]] =
                p.projection[static_cast<size_t>(r) * K + c];
    for (int c = 0; c < K; ++c) q.bias[static_cast<size_t>(perm[static_cast<size_t>(c)])] = p.bias[static_cast<size_t>(c)];
    Tensor permuted = patch_embed(v, q);
    for (int r = 0; r < base.shape[0]; ++r)
        for (int c = 0; c < K; ++c)
            REQUIRE(permuted[static_cast<size_t>(r) * K + perm[static_cast<size_t>(c)]] ==
                    base[static_cast<size_t>(r) * K + c]);
}

TEST_CASE("patch_embed gradient check") {
    Rng rng(16);
    PatchEmbedParams p;
    p.patch = 2;
    p.channels = 1;
    p.projection = random_tensor(rng, {8, 4});
    p.bias = random_tensor(rng, {4});
    Tensor x = random_tensor(rng, {1, 4, 4, 6});
    check_layer_grad(rng, [&](Tape* t) { return patch_embed(x, p, t); },
                     {&x, &p.projection, &p.bias});
}

namespace {

ConvBlockParams random_conv_block(Rng& rng, int cin, int cout) {
    ConvBlockParams b;
    b.kernel = random_tensor(rng, {cin * 27, cout}, 0.2);
    b.bias = random_tensor(rng, {cout}, 0.2);
    b.norm.gamma = Tensor::full({cout}, 1.0);
    b.norm.beta = Tensor({cout});
    return b;
}

} // namespace

TEST_CASE("conv stem halves spatial dims per block (ceil)") {
    Rng rng(17);
    std::vector<ConvBlockParams> blocks;
    blocks.push_back(random_conv_block(rng, 1, 2));
    blocks.push_back(random_conv_block(rng, 2, 2));
    blocks.push_back(random_conv_block(rng, 2, 3));
    Tensor x({1, 32, 192, 128});
    for (size_t i = 0; i < x.size(); ++i) x[i] = 0.001 * static_cast<double>(i % 97);
    Tensor y = conv_stem(x, blocks);
    REQUIRE(y.shape == Shape{3, 4, 24, 16});
}

TEST_CASE("conv block with zero weights gives zero features") {
    ConvBlockParams b;
    b.kernel = Tensor({27, 2});
    b.bias = Tensor({2});
    b.norm.gamma = Tensor::full({2}, 1.0);
    b.norm.beta = Tensor({2});
    Rng rng(18);
    Tensor x = random_tensor(rng, {1, 5, 6, 7});
    Tensor y = conv_block(x, b);
    REQUIRE(y.shape == Shape{2, 3, 3, 4});
    for (size_t i = 0; i < y.size(); ++i) REQUIRE(y[i] == 0.0);
}

TEST_CASE("strided convolution matches a hand-computed oracle on a 3^3 input") {
    // all-ones kernel over x(d,w,h) = 9d+3w+h; stride 2, pad 1 -> 2x2x2 output
    Tensor x({1, 3, 3, 3});
    for (size_t i = 0; i < 27; ++i) x[i] = static_cast<double>(i);
    Tensor kernel = Tensor::full({27, 1}, 1.0);
    Tensor cols = unfold3d(x, 3, 3, 3, 2, 2, 2, 1, 1, 1);
    Tensor y = matmul(cols, kernel);
    REQUIRE(y.shape == Shape{8, 1});
    // position (0,0,0): in-bounds taps are the low corner cube {0,1}^3
    REQUIRE(y[0] == 0.0 + 1 + 3 + 4 + 9 + 10 + 12 + 13);
    // independent full oracle
    for (int zd = 0; zd < 2; ++zd)
        for (int zw = 0; zw < 2; ++zw)
            for (int zh = 0; zh < 2; ++zh) {
                double s = 0.0;
                for (int id = 0; id < 3; ++id)
                    for (int iw = 0; iw < 3; ++iw)
                        for (int ih = 0; ih < 3; ++ih) {
                            int d = 2 * zd - 1 + id, w = 2 * zw - 1 + iw, h = 2 * zh - 1 + ih;
                            if (d < 0 || d > 2 || w < 0 || w > 2 || h < 0 || h > 2) continue;
                            s += x[static_cast<size_t>((d * 3 + w) * 3 + h)];
                        }
                REQUIRE(y[static_cast<size_t>((zd * 2 + zw) * 2 + zh)] == s);
            }
}

TEST_CASE("conv block gradient check") {
    Rng rng(19);
    ConvBlockParams b = random_conv_block(rng, 1, 2);
    Tensor x = random_tensor(rng, {1, 4, 5, 4});
    check_layer_grad(rng, [&](Tape* t) { return conv_block(x, b, t); },
                     {&x, &b.kernel, &b.bias, &b.norm.gamma, &b.norm.beta});
}

TEST_CASE("conv stem rejects too-small inputs") {
    Rng rng(20);
    std::vector<ConvBlockParams> blocks;
    blocks.push_back(random_conv_block(rng, 1, 2));
    Tensor tiny({1, 1, 1, 1});
    REQUIRE_NOTHROW(conv_stem(tiny, blocks)); // 3^3 kernel pad 1 still covers 1^3
    // but a second block after collapsing to zero-extent would be impossible to
    // configure; the guard fires inside unfold3d for genuinely undersized input
    Tensor x({1, 4, 4, 4});
    REQUIRE_THROWS_AS(unfold3d(x, 9, 9, 9, 2, 2, 2, 1, 1, 1), InputTooSmallError);
}
