#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <numeric>

#include "cropi/policy.hpp"
#include "test_util.hpp"

using namespace cropi;

TEST(Policy, ParamCountClosedForm) {
    const PolicyArch a{19, 6, 5, 7};
    const auto p = init_policy(a, 1);
    EXPECT_EQ(p.theta.size(), 6u * 19 * 5 + 7 * 5 + 7 + 19 * 7 + 19);
    EXPECT_EQ(p.theta.size(), a.param_count());
}

TEST(Policy, InitIsDeterministicAndSeedDependent) {
    const PolicyArch a{19, 6, 5, 7};
    EXPECT_EQ(init_policy(a, 3).theta, init_policy(a, 3).theta);
    EXPECT_NE(init_policy(a, 3).theta, init_policy(a, 4).theta);
}

TEST(Policy, SoftmaxNormalizes) {
    const auto p = init_policy(PolicyArch{19, 6, 8, 12}, 2, 0.5);
    const auto ds = generate_dataset(testutil::mixed_families(), 20, 1);
    for (const auto& inst : ds.instances) {
        std::vector<Token> h = inst.prompt_tokens;
        for (Token extra : {tok::kAns, tok::digit(3), tok::kEnd}) {
            const auto lp = p.log_probs(h);
            double s = 0.0;
            for (double x : lp) s += std::exp(x);
            EXPECT_NEAR(s, 1.0, 1e-12);
            h.push_back(extra);
        }
    }
}

TEST(Policy, ZeroThetaIsUniform) {
    auto p = init_policy(PolicyArch{19, 4, 3, 5}, 1);
    std::fill(p.theta.begin(), p.theta.end(), 0.0);
    const std::vector<Token> ctx{tok::kCopy, tok::digit(1), tok::kSep};
    for (double lp : p.log_probs(ctx)) EXPECT_NEAR(std::exp(lp), 1.0 / 19.0, 1e-15);
}

TEST(Policy, PaddingConvention) {
    const auto p = init_policy(PolicyArch{19, 6, 4, 5}, 9, 0.3);
    const std::vector<Token> shortctx{tok::kAdd, tok::digit(2), tok::kSep};
    const std::vector<Token> padded{tok::kPad, tok::kPad, tok::kPad, tok::kAdd, tok::digit(2), tok::kSep};
    EXPECT_EQ(next_token_logits(p, shortctx), next_token_logits(p, padded));
    // Histories longer than the window only see their tail.
    std::vector<Token> longctx{tok::digit(5), tok::digit(6), tok::digit(7)};
    longctx.insert(longctx.end(), padded.begin(), padded.end());
    EXPECT_EQ(next_token_logits(p, longctx), next_token_logits(p, padded));
}

TEST(Policy, OutOfVocabRejected) {
    const auto p = init_policy(PolicyArch{19, 4, 3, 5}, 1);
    const std::vector<Token> bad{tok::kAdd, 19};
    EXPECT_THROW(next_token_logits(p, bad), DataError);
}

TEST(Policy, SampleTrajectory) {
    const auto p = init_policy(PolicyArch{19, 6, 4, 5}, 9, 0.3);
    const auto ds = generate_dataset(testutil::mixed_families(), 10, 4);
    for (const auto& inst : ds.instances) {
        const auto tr = sample_trajectory(p, inst, 5, 77 + inst.id);
        EXPECT_LE(tr.tokens.size(), 5u);
        EXPECT_GE(tr.tokens.size(), 1u);
        EXPECT_EQ(tr, sample_trajectory(p, inst, 5, 77 + inst.id));
        const auto lp = token_logprobs(p, inst.prompt_tokens, tr.tokens);
        ASSERT_EQ(lp.size(), tr.behavior_logprobs.size());
        for (std::size_t t = 0; t < lp.size(); ++t) {
            EXPECT_NEAR(lp[t], tr.behavior_logprobs[t], 1e-12);
            EXPECT_LE(tr.behavior_logprobs[t], 0.0);
        }
        EXPECT_EQ(tr.ret, verify(inst, tr.tokens));
        for (std::size_t t = 0; t + 1 < tr.tokens.size(); ++t) EXPECT_NE(tr.tokens[t], tok::kEos);
    }
}

TEST(PolicyGradient, ZeroWeightsGiveZero) {
    const auto p = init_policy(PolicyArch{19, 6, 4, 5}, 9, 0.3);
    const std::vector<Token> prompt{tok::kCopy, tok::digit(1), tok::kSep};
    const std::vector<Token> resp{tok::kAns, tok::digit(1), tok::kEnd};
    const std::vector<double> w(3, 0.0);
    const auto g = weighted_logprob_gradient(p, std::span<const Token>(prompt), std::span<const Token>(resp),
                                             std::span<const double>(w));
    EXPECT_EQ(g.size(), p.arch.param_count());
    for (double x : g) EXPECT_EQ(x, 0.0);
}

TEST(PolicyGradient, LengthMismatchRejected) {
    const auto p = init_policy(PolicyArch{19, 6, 4, 5}, 9);
    const std::vector<Token> prompt{tok::kCopy, tok::kSep};
    const std::vector<Token> resp{tok::kAns, tok::kEnd};
    const std::vector<double> w(3, 1.0);
    EXPECT_THROW(weighted_logprob_gradient(p, std::span<const Token>(prompt), std::span<const Token>(resp),
                                           std::span<const double>(w)),
                 DataError);
}

TEST(PolicyGradient, LinearInWeights) {
    Rng rng(5);
    const auto p = init_policy(PolicyArch{19, 6, 6, 8}, 12, 0.4);
    const std::vector<Token> prompt{tok::kSort, tok::digit(4), tok::digit(2), tok::kSep};
    const std::vector<Token> resp{tok::kAns, tok::digit(2), tok::digit(4), tok::kEnd, tok::kEos};
    std::vector<double> w1(resp.size()), w2(resp.size()), w12(resp.size());
    for (std::size_t i = 0; i < resp.size(); ++i) {
        w1[i] = rng.normal();
        w2[i] = rng.normal();
        w12[i] = w1[i] + w2[i];
    }
    auto grad = [&](const std::vector<double>& w) {
        return weighted_logprob_gradient(p, std::span<const Token>(prompt), std::span<const Token>(resp),
                                         std::span<const double>(w));
    };
    const auto g1 = grad(w1), g2 = grad(w2), g12 = grad(w12);
    for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(g1[i] + g2[i], g12[i], 1e-10);
}

TEST(PolicyGradient, MatchesFiniteDifferences) {
    // d <= 2000; every coordinate is checked.
    const PolicyArch arch{tok::vocab_size_for(5), 5, 6, 8};
    ASSERT_LE(arch.param_count(), 2000u);
    const auto ds = generate_dataset(testutil::mixed_families(5), 10, 21);
    for (int c = 0; c < 5; ++c) {
        const auto tc = testutil::random_gradient_case(arch, ds, 1000 + c);
        const auto analytic = weighted_logprob_gradient(tc.params, std::span<const Token>(tc.prompt),
                                                        std::span<const Token>(tc.response),
                                                        std::span<const double>(tc.weights));
        const auto numeric = testutil::finite_difference_gradient(tc, 1e-5);
        EXPECT_LT(testutil::max_relative_error(analytic, numeric), 1e-4) << "case " << c;
    }
}

TEST(PolicyGradient, FloatModeTracksDouble) {
    const auto pd = init_policy<double>(PolicyArch{19, 6, 6, 8}, 12, 0.4);
    PolicyParams<float> pf;
    pf.arch = pd.arch;
    pf.theta.assign(pd.theta.begin(), pd.theta.end());
    const std::vector<Token> prompt{tok::kSort, tok::digit(4), tok::digit(2), tok::kSep};
    const std::vector<Token> resp{tok::kAns, tok::digit(2), tok::kEnd};
    const std::vector<double> w{0.5, -1.0, 0.25};
    const auto gd = weighted_logprob_gradient(pd, std::span<const Token>(prompt), std::span<const Token>(resp),
                                              std::span<const double>(w));
    const auto gf = weighted_logprob_gradient(pf, std::span<const Token>(prompt), std::span<const Token>(resp),
                                              std::span<const double>(w));
    for (std::size_t i = 0; i < gd.size(); ++i) EXPECT_NEAR(gd[i], gf[i], 1e-5);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    auto p = init_policy(PolicyArch{19, 6, 6, 8}, 12, 0.4);
    p.theta[3] = 1.0 / 3.0;
    p.theta[4] = -5e-310;  // subnormal
    p.label = "base";
    const auto path = (std::filesystem::temp_directory_path() / "cropi_ckpt.txt").string();
    save_checkpoint(p, path, {{"config_digest", "abc"}});
    nlohmann::json header;
    const auto q = load_checkpoint<double>(path, &header);
    EXPECT_EQ(q, p);
    EXPECT_EQ(header.at("config_digest"), "abc");
    EXPECT_EQ(header.at("d"), p.theta.size());
    for (std::size_t i = 0; i < p.theta.size(); ++i)
        EXPECT_EQ(std::bit_cast<std::uint64_t>(p.theta[i]), std::bit_cast<std::uint64_t>(q.theta[i]));
    EXPECT_THROW(load_checkpoint<double>(path + ".missing"), ArtifactError);
}

TEST(WarmStart, RaisesGoldLikelihood) {
    const auto ds = generate_dataset(testutil::mixed_families(), 40, 2);
    const auto p0 = init_policy(PolicyArch{19, 8, 8, 16}, 3);
    const auto p1 = warm_start(p0, ds.instances, 50, 8, 0.5, 0.0, 4);
    double before = 0.0, after = 0.0;
    for (const auto& inst : ds.instances) {
        const auto gold = gold_response(inst);
        const auto l0 = token_logprobs(p0, inst.prompt_tokens, gold);
        const auto l1 = token_logprobs(p1, inst.prompt_tokens, gold);
        before += l0.front() + l0[l0.size() - 2] + l0.back();
        after += l1.front() + l1[l1.size() - 2] + l1.back();
    }
    EXPECT_GT(after, before);
}
