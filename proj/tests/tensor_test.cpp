#include <doctest.h>

#include <cmath>
#include <vector>

#include "crossflow/kernels.hpp"
#include "crossflow/rng.hpp"
#include "crossflow/tensor.hpp"

using namespace crossflow;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(s));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// Independent summation oracle for valid cross-correlation, written as the
// most literal possible nested loop.
Tensor conv2d_valid_oracle(const Tensor& x, const Tensor& k, const Tensor& b) {
    const int co = k.dim(0), ci = k.dim(1), kh = k.dim(2), kw = k.dim(3);
    const int oh = x.dim(1) - kh + 1, ow = x.dim(2) - kw + 1;
    Tensor y({co, oh, ow});
    for (int o = 0; o < co; ++o)
        for (int p = 0; p < oh; ++p)
            for (int q = 0; q < ow; ++q) {
                double s = b.at(o);
                for (int c = 0; c < ci; ++c)
                    for (int i = 0; i < kh; ++i)
                        for (int j = 0; j < kw; ++j) s += x.at(c, p + i, q + j) * k.at(o, c, i, j);
                y.at(o, p, q) = s;
            }
    return y;
}

Tensor transpose_channels(const Tensor& k) {
    Tensor out({k.dim(1), k.dim(0), k.dim(2), k.dim(3)});
    for (int o = 0; o < k.dim(0); ++o)
        for (int c = 0; c < k.dim(1); ++c)
            for (int i = 0; i < k.dim(2); ++i)
                for (int j = 0; j < k.dim(3); ++j) out.at(c, o, i, j) = k.at(o, c, i, j);
    return out;
}

}  // namespace

TEST_CASE("shape invariants") {
    CHECK_THROWS_AS(Tensor(Shape{}), ContractViolation);
    CHECK_THROWS_AS(Tensor(Shape{2, 0}), ContractViolation);
    CHECK_THROWS_AS(Tensor(Shape{2, 2}, {1.0, 2.0}), ContractViolation);
    Tensor t({2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.shape == Shape{2, 3});
    CHECK(t.shape != Shape{3, 2});
}

TEST_CASE("row-major indexing: last axis varies fastest") {
    Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.at(0, 2) == 3.0);
    CHECK(t.at(1, 0) == 4.0);
}

TEST_CASE("conv2d valid 2x2 all-ones over 1..9") {
    Tensor x({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor k = Tensor::full({1, 1, 2, 2}, 1.0);
    Tensor b({1});
    Tensor y = conv2d(x, k, b, Padding::Valid);
    CHECK(y.shape == Shape{1, 2, 2});
    CHECK(y.data == std::vector<double>{12, 16, 24, 28});
}

TEST_CASE("conv2d 1x1 identity kernel") {
    Rng rng(7);
    Tensor x = random_tensor({1, 4, 5}, rng);
    Tensor k({1, 1, 1, 1}, {1.0});
    Tensor b({1});
    Tensor y = conv2d(x, k, b, Padding::Same);
    CHECK(y.data == x.data);
}

TEST_CASE("conv2d same padding preserves spatial dims at table geometry") {
    Rng rng(3);
    Tensor x = random_tensor({1, 80, 60}, rng);
    Tensor k = random_tensor({16, 1, 3, 3}, rng);
    Tensor b = random_tensor({16}, rng);
    Tensor y = conv2d(x, k, b, Padding::Same);
    CHECK(y.shape == Shape{16, 80, 60});
}

TEST_CASE("conv2d rejects channel mismatch") {
    Tensor x({2, 4, 4});
    Tensor k({3, 1, 2, 2});
    Tensor b({3});
    CHECK_THROWS_AS(conv2d(x, k, b, Padding::Valid), ContractViolation);
}

TEST_CASE("conv2d matches summation oracle on random shapes") {
    Rng rng(11);
    for (int iter = 0; iter < 20; ++iter) {
        const int ci = 1 + static_cast<int>(rng.uniform_int(3));
        const int co = 1 + static_cast<int>(rng.uniform_int(3));
        const int kh = 1 + static_cast<int>(rng.uniform_int(3));
        const int kw = 1 + static_cast<int>(rng.uniform_int(3));
        const int h = kh + static_cast<int>(rng.uniform_int(5));
        const int w = kw + static_cast<int>(rng.uniform_int(5));
        Tensor x = random_tensor({ci, h, w}, rng);
        Tensor k = random_tensor({co, ci, kh, kw}, rng);
        Tensor b = random_tensor({co}, rng);
        Tensor got = conv2d(x, k, b, Padding::Valid);
        Tensor want = conv2d_valid_oracle(x, k, b);
        REQUIRE(got.shape == want.shape);
        CHECK(got.shape == Shape{co, h - kh + 1, w - kw + 1});
        for (std::size_t i = 0; i < got.numel(); ++i)
            CHECK(got.data[i] == doctest::Approx(want.data[i]).epsilon(1e-12));
        // same padding preserves the spatial dims for any kernel that fits
        CHECK(conv2d(x, k, b, Padding::Same).shape == Shape{co, h, w});
        CHECK(deconv2d(x, k, b).shape == Shape{co, h + kh - 1, w + kw - 1});
    }
}

TEST_CASE("deconv2d scatter oracle: single input cell") {
    Tensor x({1, 1, 1}, {2.0});
    Tensor k = Tensor::full({1, 1, 2, 2}, 1.0);
    Tensor b({1});
    Tensor y = deconv2d(x, k, b);
    CHECK(y.shape == Shape{1, 2, 2});
    CHECK(y.data == std::vector<double>{2, 2, 2, 2});
}

TEST_CASE("deconv2d 1x1 identity kernel") {
    Rng rng(5);
    Tensor x = random_tensor({1, 3, 4}, rng);
    Tensor k({1, 1, 1, 1}, {1.0});
    Tensor b({1});
    CHECK(deconv2d(x, k, b).data == x.data);
}

TEST_CASE("deconv2d growth: 33x23 input with 8x8 kernels reaches 40x30") {
    Tensor x({1, 33, 23});
    Tensor k({16, 1, 8, 8});
    Tensor b({16});
    CHECK(deconv2d(x, k, b).shape == Shape{16, 40, 30});
}

TEST_CASE("deconv2d is the adjoint of valid conv2d") {
    Rng rng(13);
    for (int iter = 0; iter < 50; ++iter) {
        const int ci = 1 + static_cast<int>(rng.uniform_int(3));
        const int co = 1 + static_cast<int>(rng.uniform_int(3));
        const int kh = 1 + static_cast<int>(rng.uniform_int(4));
        const int kw = 1 + static_cast<int>(rng.uniform_int(4));
        const int h = kh + static_cast<int>(rng.uniform_int(5));
        const int w = kw + static_cast<int>(rng.uniform_int(5));
        Tensor x = random_tensor({ci, h, w}, rng);
        Tensor k = random_tensor({co, ci, kh, kw}, rng);
        Tensor y = random_tensor({co, h - kh + 1, w - kw + 1}, rng);
        Tensor zb_out({co}), zb_in({ci});
        const double lhs = dot(conv2d(x, k, zb_out, Padding::Valid), y);
        const double rhs = dot(x, deconv2d(y, transpose_channels(k), zb_in));
        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
    }
}

TEST_CASE("conv2d and deconv2d are linear in input and kernels") {
    Rng rng(17);
    for (int iter = 0; iter < 5; ++iter) {
        const double alpha = rng.uniform(-2, 2), beta = rng.uniform(-2, 2);
        Tensor x = random_tensor({2, 6, 6}, rng);
        Tensor y = random_tensor({2, 6, 6}, rng);
        Tensor k = random_tensor({3, 2, 3, 3}, rng);
        Tensor zb({3});

        Tensor mix = add(scale(x, alpha), scale(y, beta));
        Tensor want = add(scale(conv2d(x, k, zb, Padding::Same), alpha),
                          scale(conv2d(y, k, zb, Padding::Same), beta));
        Tensor got = conv2d(mix, k, zb, Padding::Same);
        for (std::size_t i = 0; i < got.numel(); ++i)
            CHECK(got.data[i] == doctest::Approx(want.data[i]).epsilon(1e-11));

        Tensor wantd = add(scale(deconv2d(x, k, zb), alpha), scale(deconv2d(y, k, zb), beta));
        Tensor gotd = deconv2d(mix, k, zb);
        for (std::size_t i = 0; i < gotd.numel(); ++i)
            CHECK(gotd.data[i] == doctest::Approx(wantd.data[i]).epsilon(1e-11));
    }
}

TEST_CASE("maxpool2x2 shapes and argmax") {
    SUBCASE("table geometry") {
        Tensor x({16, 80, 60});
        CHECK(maxpool2x2(x).output.shape == Shape{16, 40, 30});
    }
    SUBCASE("constant input stays constant") {
        Tensor x = Tensor::full({2, 4, 4}, 3.5);
        PoolResult r = maxpool2x2(x);
        for (double v : r.output.data) CHECK(v == 3.5);
    }
    SUBCASE("single window picks max and records its position") {
        Tensor x({1, 2, 2}, {1, 2, 3, 4});
        PoolResult r = maxpool2x2(x);
        CHECK(r.output.data[0] == 4.0);
        CHECK(r.argmax[0] == 3);  // row 1, col 1
    }
    SUBCASE("odd dims rejected") {
        Tensor x({1, 3, 4});
        CHECK_THROWS_AS(maxpool2x2(x), ContractViolation);
    }
}

TEST_CASE("affine") {
    SUBCASE("identity weights") {
        Tensor w({2, 2}, {1, 0, 0, 1});
        Tensor x({2}, {3, 4});
        Tensor b({2});
        CHECK(affine(x, w, b).data == std::vector<double>{3, 4});
    }
    SUBCASE("zero weights return bias") {
        Tensor w({2, 3});
        Tensor x({3}, {9, 9, 9});
        Tensor b({2}, {5, -1});
        CHECK(affine(x, w, b).data == std::vector<double>{5, -1});
    }
    SUBCASE("hand computation") {
        Tensor w({2, 2}, {1, 2, 3, 4});
        Tensor x({2}, {1, 1});
        Tensor b({2});
        CHECK(affine(x, w, b).data == std::vector<double>{3, 7});
    }
    SUBCASE("dimension mismatch") {
        Tensor w({2, 3});
        Tensor x({2});
        Tensor b({2});
        CHECK_THROWS_AS(affine(x, w, b), ContractViolation);
    }
    SUBCASE("batched maps rows independently") {
        Tensor w({2, 2}, {1, 2, 3, 4});
        Tensor x({2, 2}, {1, 1, 2, 0});
        Tensor b({2}, {1, 1});
        Tensor y = affine_batched(x, w, b);
        CHECK(y.shape == Shape{2, 2});
        CHECK(y.data == std::vector<double>{4, 8, 3, 7});
    }
}

TEST_CASE("concat") {
    SUBCASE("channel concatenation 16+16=32") {
        Tensor a({16, 4, 3}), b({16, 4, 3});
        CHECK(concat({a, b}, 0).shape == Shape{32, 4, 3});
    }
    SUBCASE("feature concatenation 128+64=192") {
        Tensor a({128}), b({64});
        CHECK(concat({a, b}, 0).shape == Shape{192});
    }
    SUBCASE("single part is identity") {
        Tensor a({3, 2}, {1, 2, 3, 4, 5, 6});
        CHECK(concat(std::vector<Tensor>{a}, 1).data == a.data);
    }
    SUBCASE("mismatch rejected") {
        Tensor a({2, 3}), b({2, 4});
        CHECK_THROWS_AS(concat({a, b}, 0), ContractViolation);
        Tensor c({2});
        CHECK_THROWS_AS(concat({a, c}, 0), ContractViolation);
    }
}

TEST_CASE("concat then split recovers parts exactly") {
    Rng rng(23);
    for (int iter = 0; iter < 10; ++iter) {
        const int axis = static_cast<int>(rng.uniform_int(3));
        std::vector<int> dims = {1 + static_cast<int>(rng.uniform_int(4)),
                                 1 + static_cast<int>(rng.uniform_int(4)),
                                 1 + static_cast<int>(rng.uniform_int(4))};
        std::vector<Tensor> parts;
        std::vector<int> sizes;
        const int nparts = 1 + static_cast<int>(rng.uniform_int(3));
        for (int i = 0; i < nparts; ++i) {
            std::vector<int> d = dims;
            d[static_cast<std::size_t>(axis)] = 1 + static_cast<int>(rng.uniform_int(3));
            sizes.push_back(d[static_cast<std::size_t>(axis)]);
            parts.push_back(random_tensor(Shape(d), rng));
        }
        Tensor whole = concat(parts, axis);
        std::vector<Tensor> back = split(whole, axis, sizes);
        REQUIRE(back.size() == parts.size());
        for (std::size_t i = 0; i < parts.size(); ++i) {
            CHECK(back[i].shape == parts[i].shape);
            CHECK(back[i].data == parts[i].data);
        }
    }
}

TEST_CASE("reshape and flatten") {
    Tensor v({759});
    CHECK(reshape(v, {1, 33, 23}).shape == Shape{1, 33, 23});
    Tensor v2({375});
    CHECK(reshape(v2, {1, 25, 15}).shape == Shape{1, 25, 15});

    Rng rng(29);
    Tensor t = random_tensor({3, 4, 5}, rng);
    Tensor round = reshape(reshape(t, {60}), {3, 4, 5});
    CHECK(round.data == t.data);
    CHECK(flatten(t).shape == Shape{60});
    CHECK_THROWS_AS(reshape(t, {61}), ContractViolation);
}

TEST_CASE("squared_l2_diff") {
    Tensor a({2}, {1, 2});
    CHECK(squared_l2_diff(a, a) == 0.0);
    Tensor b({2}, {0, 0});
    CHECK(squared_l2_diff(a, b) == 5.0);

    Rng rng(31);
    Tensor x = random_tensor({4, 7}, rng);
    Tensor y = random_tensor({4, 7}, rng);
    double want = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) want += (x.data[i] - y.data[i]) * (x.data[i] - y.data[i]);
    CHECK(squared_l2_diff(x, y) == doctest::Approx(want).epsilon(1e-15));

    Tensor z({3});
    CHECK_THROWS_AS(squared_l2_diff(x, z), ContractViolation);
}
