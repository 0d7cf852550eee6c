#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "cleansift/rng.hpp"
#include "cleansift/sampler.hpp"
#include "cleansift/weightnet.hpp"
#include "support.hpp"

using namespace cleansift;
namespace ts = testsupport;

TEST_CASE("weight net is an elementwise map: permuting losses permutes weights") {
    auto psi = make_weightnet<float>(3);
    // give the output layer some structure so weights differ per input
    SeededRng rng(4);
    for (auto& v : psi.w2.data) v = static_cast<float>(rng.uniform(-0.5, 0.5));
    std::vector<float> losses = {0.1f, 2.0f, 0.7f, 3.5f, 0.0f};
    auto w = weightnet_forward(psi, std::span<const float>(losses));
    std::vector<float> perm = {3.5f, 0.0f, 0.1f, 2.0f, 0.7f};
    auto wp = weightnet_forward(psi, std::span<const float>(perm));
    CHECK(wp[0] == w[3]);
    CHECK(wp[1] == w[4]);
    CHECK(wp[2] == w[0]);
    CHECK(wp[3] == w[1]);
    CHECK(wp[4] == w[2]);
}

TEST_CASE("zero-initialized output layer maps every loss to exactly 0.5") {
    auto psi = make_weightnet<float>(99);
    std::vector<float> losses = {0.0f, 0.5f, 1.0f, 10.0f, 100.0f};
    for (float w : weightnet_forward(psi, std::span<const float>(losses))) CHECK(w == 0.5f);
}

TEST_CASE("weights stay strictly inside (0,1) even at extreme inputs") {
    auto psi = make_weightnet<float>(5);
    SeededRng rng(6);
    for (auto& v : psi.w2.data) v = static_cast<float>(rng.uniform(-2.0, 2.0));
    psi.b2 = 30.0f;
    std::vector<float> losses = {0.0f, 1e4f, 3e5f};
    for (float w : weightnet_forward(psi, std::span<const float>(losses))) {
        CHECK(w > 0.0f);
        CHECK(w < 1.0f);
    }
}

TEST_CASE("non-finite losses are rejected") {
    auto psi = make_weightnet<float>(7);
    std::vector<float> losses = {0.1f, std::numeric_limits<float>::quiet_NaN()};
    CHECK_THROWS_AS(weightnet_forward(psi, std::span<const float>(losses)),
                    std::invalid_argument);
}

TEST_CASE("weight net gradients match central finite differences") {
    auto psi = make_weightnet<double>(8, 20);
    SeededRng rng(9);
    for (auto& v : psi.w2.data) v = rng.uniform(-0.5, 0.5);
    psi.b2 = 0.2;
    std::vector<double> losses = {0.37, 1.91, 3.14};
    auto g = weightnet_grads(psi, std::span<const double>(losses));
    auto flat = flatten_weightnet(psi);

    for (size_t i = 0; i < losses.size(); ++i) {
        std::vector<double> analytic, fd;
        for (size_t pi = 0; pi < flat.size(); ++pi) {
            analytic.push_back(g.d_params[i][pi]);
            auto eval = [&](double x) {
                auto probe = flat;
                probe[pi] = x;
                auto pc = psi;
                unflatten_weightnet(pc, std::span<const double>(probe));
                std::vector<double> one = {losses[i]};
                return static_cast<double>(weightnet_forward(pc, std::span<const double>(one))[0]);
            };
            fd.push_back(ts::central_diff(eval, flat[pi], 1e-5));
        }
        // input gradient
        analytic.push_back(g.d_input[i]);
        auto eval_in = [&](double x) {
            std::vector<double> one = {x};
            return static_cast<double>(weightnet_forward(psi, std::span<const double>(one))[0]);
        };
        fd.push_back(ts::central_diff(eval_in, losses[i], 1e-6));
        CHECK(ts::max_rel_error(analytic, fd) < 1e-4);
    }
}

namespace {

// sampler rigged to produce fixed logits regardless of the input dimension
SamplerNet<float> rigged_net(int dim, float z0, float z1) {
    SamplerNet<float> net;
    net.fc1 = Tensor<float>({1, dim});
    net.fc1.data[0] = 1.0f;  // h = grad[0]
    net.fc2 = Tensor<float>({2, 1});
    net.fc2.data[0] = z0;
    net.fc2.data[1] = z1;
    return net;
}

}  // namespace

TEST_CASE("saturated logits select deterministically regardless of the draw") {
    SamplerParams<float> params;
    params.tau = 1e-6f;
    params.nets.push_back(rigged_net(3, 10.0f, -10.0f));
    std::vector<Tensor<float>> grads = {Tensor<float>({3}, {1.0f, 0.0f, 0.0f})};
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        SeededRng rng(seed);
        auto sel = sampler_forward(params, grads, rng);
        CHECK(sel[0]);
    }
}

TEST_CASE("equal logits with a fixed seed reproduce the same selection") {
    SamplerParams<float> params;
    params.nets.push_back(rigged_net(2, 0.0f, 0.0f));
    std::vector<Tensor<float>> grads = {Tensor<float>({2}, {1.0f, 1.0f})};
    SeededRng a(123), b(123);
    auto s1 = sampler_forward(params, grads, a);
    auto s2 = sampler_forward(params, grads, b);
    CHECK(s1 == s2);
}

TEST_CASE("symmetric Gumbel-softmax selects half the time") {
    // 10,000 seeded draws with logits (0,0) and tau=1: frequency 0.5 +- 0.02.
    // Expected count precomputed from the logistic law: P(select) = 1/2.
    SamplerParams<float> params;
    params.nets.push_back(rigged_net(2, 0.0f, 0.0f));
    params.nets.push_back(rigged_net(2, 5.0f, 5.0f));  // equal logits, nonzero
    std::vector<Tensor<float>> grads = {Tensor<float>({2}, {1.0f, 1.0f}),
                                        Tensor<float>({2}, {1.0f, 1.0f})};
    SeededRng rng(2024);
    int hits = 0;
    const int trials = 10000;
    for (int t = 0; t < trials; ++t) {
        auto sel = sampler_forward(params, grads, rng);
        hits += sel[0] ? 1 : 0;
    }
    double freq = static_cast<double>(hits) / trials;
    CHECK(freq > 0.48);
    CHECK(freq < 0.52);
}

TEST_CASE("the deepest layer is force-selected when every sampler rejects") {
    SamplerParams<float> params;
    params.nets.push_back(rigged_net(2, -10.0f, 10.0f));
    params.nets.push_back(rigged_net(2, -10.0f, 10.0f));
    std::vector<Tensor<float>> grads = {Tensor<float>({2}, {1.0f, 0.0f}),
                                        Tensor<float>({2}, {1.0f, 0.0f})};
    SeededRng rng(5);
    auto sel = sampler_forward(params, grads, rng);
    CHECK_FALSE(sel[0]);
    CHECK(sel[1]);
}

TEST_CASE("sampler logits and their parameter gradients match finite differences") {
    auto params = make_samplers<double>({6}, 91, 1.0, 4);
    auto& net = params.nets[0];
    SeededRng rng(92);
    std::vector<double> grad(6);
    for (auto& v : grad) v = rng.uniform(-1, 1);

    SamplerLogitCache<double> cache;
    auto [z0, z1] = sampler_logits(net, std::span<const double>(grad), &cache);
    for (int which = 0; which < 2; ++which) {
        auto g = sampler_logit_grads(net, std::span<const double>(grad), cache,
                                     which == 0 ? 1.0 : 0.0, which == 0 ? 0.0 : 1.0);
        std::vector<double> analytic, fd;
        auto eval = [&](SamplerNet<double>& probe) {
            auto [a, b] = sampler_logits(probe, std::span<const double>(grad),
                                         static_cast<SamplerLogitCache<double>*>(nullptr));
            return which == 0 ? static_cast<double>(a) : static_cast<double>(b);
        };
        for (std::int64_t i = 0; i < net.fc1.size(); ++i) {
            analytic.push_back(g.fc1[i]);
            auto probe = net;
            auto f = [&](double x) {
                probe.fc1[i] = x;
                return eval(probe);
            };
            fd.push_back(ts::central_diff(f, net.fc1[i], 1e-5));
        }
        for (std::int64_t i = 0; i < net.fc2.size(); ++i) {
            analytic.push_back(g.fc2[i]);
            auto probe = net;
            auto f = [&](double x) {
                probe.fc2[i] = x;
                return eval(probe);
            };
            fd.push_back(ts::central_diff(f, net.fc2[i], 1e-5));
        }
        analytic.push_back(g.prelu_a);
        {
            auto probe = net;
            auto f = [&](double x) {
                probe.prelu_a = x;
                return eval(probe);
            };
            fd.push_back(ts::central_diff(f, net.prelu_a, 1e-5));
        }
        CHECK(ts::max_rel_error(analytic, fd) < 1e-4);
    }
    (void)z0;
    (void)z1;
}

TEST_CASE("sampler construction validates tau and input dims") {
    CHECK_THROWS_AS(make_samplers<float>({4}, 1, 0.0f), std::invalid_argument);
    auto params = make_samplers<float>({4, 9}, 1);
    std::vector<Tensor<float>> wrong = {Tensor<float>({4})};
    SeededRng rng(1);
    CHECK_THROWS_AS(sampler_forward(params, wrong, rng), std::invalid_argument);
}
