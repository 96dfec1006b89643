// Analysis suite: delta_m against the published table arithmetic,
// permutation importance properties, and the inter-rater reliability
// statistics with their counting oracles.

#include <catch2/catch_amalgamated.hpp>

#include "atrc/analysis.hpp"

using namespace atrc;

namespace {

MetricsReport nyud_report(double semseg, double depth, double normal, double bound) {
    MetricsReport r;
    r.task_names = {"semseg", "depth", "normal", "bound"};
    r.values = {semseg, depth, normal, bound};
    r.gammas = {0, 1, 1, 0};
    return r;
}

}  // namespace

TEST_CASE("delta_m") {
    const auto single = nyud_report(38.02, 0.6104, 20.94, 76.22);

    SECTION("model equal to baseline is zero") {
        REQUIRE(delta_m(single, single) == Catch::Approx(0.0).margin(1e-12));
    }

    SECTION("multi-task baseline row reproduces -1.89") {
        const auto multi = nyud_report(36.35, 0.6284, 21.02, 76.36);
        REQUIRE(delta_m(multi, single) == Catch::Approx(-1.89).margin(0.01));
    }

    SECTION("published distillation row reproduces +2.94") {
        const auto mti = nyud_report(39.89, 0.5824, 20.57, 76.60);
        REQUIRE(delta_m(mti, single) == Catch::Approx(2.94).margin(0.01));
    }

    SECTION("linear in each model metric with direction-corrected sign") {
        auto probe = single;
        probe.values[1] *= 1.5;  // worsen a lower-is-better metric
        const double worse = delta_m(probe, single);
        probe.values[1] = single.values[1] * 2.0;
        const double even_worse = delta_m(probe, single);
        REQUIRE(worse < 0.0);
        REQUIRE(even_worse < worse);
        // exactly linear: doubling the perturbation doubles the drop
        REQUIRE(even_worse == Catch::Approx(2.0 * worse).margin(1e-9));
    }

    SECTION("zero baseline metric is an error") {
        auto broken = single;
        broken.values[2] = 0.0;
        REQUIRE_THROWS_AS(delta_m(single, broken), std::invalid_argument);
    }
}

TEST_CASE("percentage agreement") {
    using C = ContextType;
    std::vector<std::vector<C>> identical(4, {C::kGlobal, C::kLocal, C::kNone});
    REQUIRE(percentage_agreement(identical) == Catch::Approx(1.0));

    std::vector<std::vector<C>> disjoint{{C::kGlobal, C::kGlobal}, {C::kLocal, C::kLocal}};
    REQUIRE(percentage_agreement(disjoint) == Catch::Approx(0.0));

    SECTION("hand-built three-run case matches pair enumeration") {
        std::vector<std::vector<C>> runs{
            {C::kGlobal, C::kLocal, C::kNone, C::kTLabel},
            {C::kGlobal, C::kLocal, C::kSLabel, C::kTLabel},
            {C::kLocal, C::kLocal, C::kNone, C::kTLabel},
        };
        // pairs: (0,1) agree 3/4, (0,2) agree 3/4, (1,2) agree 2/4
        const double want = (0.75 + 0.75 + 0.5) / 3.0;
        REQUIRE(percentage_agreement(runs) == Catch::Approx(want).margin(1e-12));
    }

    SECTION("symmetric in run order") {
        std::vector<std::vector<C>> runs{{C::kGlobal, C::kNone}, {C::kLocal, C::kNone},
                                         {C::kGlobal, C::kLocal}};
        auto reversed = runs;
        std::reverse(reversed.begin(), reversed.end());
        REQUIRE(percentage_agreement(runs) == Catch::Approx(percentage_agreement(reversed)));
    }

    REQUIRE_THROWS_AS(percentage_agreement({{C::kGlobal}}), std::invalid_argument);
}

TEST_CASE("cohens kappa") {
    using C = ContextType;

    SECTION("identical runs with multiple categories give 1") {
        std::vector<C> a{C::kGlobal, C::kLocal, C::kGlobal, C::kNone};
        REQUIRE(cohens_kappa(a, a) == Catch::Approx(1.0));
    }

    SECTION("worked two-category example: po=0.7, marginals 0.6/0.4 and 0.5/0.5") {
        std::vector<C> a, b;
        auto push = [&](std::size_t n, C ca, C cb) {
            for (std::size_t i = 0; i < n; ++i) {
                a.push_back(ca);
                b.push_back(cb);
            }
        };
        push(8, C::kGlobal, C::kGlobal);
        push(6, C::kLocal, C::kLocal);
        push(4, C::kGlobal, C::kLocal);
        push(2, C::kLocal, C::kGlobal);
        // po = 14/20 = 0.7; pe = 0.6*0.5 + 0.4*0.5 = 0.5; kappa = 0.4
        REQUIRE(cohens_kappa(a, b) == Catch::Approx(0.4).margin(1e-12));
    }

    SECTION("statistically independent uniform raters approach zero") {
        CounterRng rng(7);
        const std::size_t n = 100000;
        std::vector<C> a(n), b(n);
        for (std::size_t i = 0; i < n; ++i) {
            a[i] = kContextOrder[rng.below(5)];
            b[i] = kContextOrder[rng.below(5)];
        }
        REQUIRE(std::abs(cohens_kappa(a, b)) < 0.02);
    }

    SECTION("degenerate single-category raters") {
        std::vector<C> a(10, C::kGlobal);
        REQUIRE(cohens_kappa(a, a) == 1.0);  // pe = 1, po = 1
        std::vector<C> b(10, C::kLocal);
        REQUIRE(cohens_kappa(a, b) == 0.0);  // pe = ... po = 0
    }

    REQUIRE_THROWS_AS(cohens_kappa({}, {}), std::invalid_argument);
}

TEST_CASE("lights kappa") {
    using C = ContextType;
    std::vector<std::vector<C>> identical(3, {C::kGlobal, C::kLocal, C::kNone, C::kGlobal});
    REQUIRE(lights_kappa(identical) == Catch::Approx(1.0));

    SECTION("two runs reduce to their Cohen's kappa") {
        std::vector<C> a{C::kGlobal, C::kLocal, C::kNone, C::kGlobal, C::kSLabel};
        std::vector<C> b{C::kGlobal, C::kNone, C::kNone, C::kLocal, C::kSLabel};
        REQUIRE(lights_kappa({a, b}) == Catch::Approx(cohens_kappa(a, b)).margin(1e-15));
    }

    SECTION("five random runs equal the pair-loop oracle") {
        CounterRng rng(11);
        std::vector<std::vector<C>> runs(5, std::vector<C>(40));
        for (auto& r : runs)
            for (auto& c : r) c = kContextOrder[rng.below(5)];
        double want = 0;
        std::size_t pairs = 0;
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t j = i + 1; j < 5; ++j) {
                want += cohens_kappa(runs[i], runs[j]);
                ++pairs;
            }
        want /= static_cast<double>(pairs);
        REQUIRE(lights_kappa(runs) == Catch::Approx(want).margin(1e-12));
    }

    SECTION("invariant under run permutation") {
        CounterRng rng(13);
        std::vector<std::vector<C>> runs(4, std::vector<C>(20));
        for (auto& r : runs)
            for (auto& c : r) c = kContextOrder[rng.below(5)];
        auto shuffled = runs;
        std::swap(shuffled[0], shuffled[3]);
        std::swap(shuffled[1], shuffled[2]);
        REQUIRE(lights_kappa(runs) == Catch::Approx(lights_kappa(shuffled)).margin(1e-15));
    }
}

TEST_CASE("pearson correlation") {
    std::vector<double> x{1, 2, 3, 4, 5};
    REQUIRE(pearson_correlation(x, x) == Catch::Approx(1.0));
    std::vector<double> nx{-1, -2, -3, -4, -5};
    REQUIRE(pearson_correlation(x, nx) == Catch::Approx(-1.0));

    SECTION("random vectors match the scalar formula") {
        CounterRng rng(17);
        std::vector<double> a(30), b(30);
        for (std::size_t i = 0; i < 30; ++i) {
            a[i] = rng.uniform(-2, 2);
            b[i] = rng.uniform(-2, 2);
        }
        double ma = 0, mb = 0;
        for (std::size_t i = 0; i < 30; ++i) {
            ma += a[i] / 30;
            mb += b[i] / 30;
        }
        double sab = 0, saa = 0, sbb = 0;
        for (std::size_t i = 0; i < 30; ++i) {
            sab += (a[i] - ma) * (b[i] - mb);
            saa += (a[i] - ma) * (a[i] - ma);
            sbb += (b[i] - mb) * (b[i] - mb);
        }
        REQUIRE(pearson_correlation(a, b) == Catch::Approx(sab / std::sqrt(saa * sbb)).margin(1e-12));
    }

    std::vector<double> flat(5, 2.0);
    REQUIRE_THROWS_AS(pearson_correlation(flat, x), std::invalid_argument);
}

TEST_CASE("permutation importance") {
    SceneSpec scene;
    scene.height = scene.width = 12;
    scene.seed = 19;
    auto data = prepare_data(scene, 12, 6, 8, 10, 3);
    auto tasks = default_tasks(8, 10);
    ModelConfig cfg;
    cfg.backbone_channels = 8;
    cfg.backbone_depth = 2;
    cfg.feat_channels = 8;
    cfg.dk = 4;
    cfg.dv = 4;
    cfg.local_window = 5;
    cfg.mode = ArchMode::kFixed;
    cfg.fixed_arch.assign(16, ContextType::kGlobal);
    cfg.fixed_arch[2] = ContextType::kNone;  // one severed connection

    MultiTaskNetT<float> net(cfg, tasks, 29);
    // single-task style baseline report: evaluate the same net (values only
    // anchor the delta, any nonzero report works for the property checks)
    auto baseline = evaluate(net, data.test, data.test_regions, 4);

    SECTION("severed blocks report zero drop and are flagged") {
        auto imp = permutation_importance(net, data.test, data.test_regions, 4, baseline, 2, 7);
        REQUIRE(imp.absent[2]);
        REQUIRE(imp.mean_drop[2] == 0.0);
        REQUIRE_FALSE(imp.absent[0]);
    }

    SECTION("a single-sample split makes every permutation the identity") {
        std::vector<Sample> one(data.test.begin(), data.test.begin() + 1);
        std::vector<std::array<std::vector<std::int32_t>, 4>> one_r(data.test_regions.begin(),
                                                                    data.test_regions.begin() + 1);
        auto base1 = evaluate(net, one, one_r, 1);
        auto imp = permutation_importance(net, one, one_r, 1, base1, 3, 11);
        for (std::size_t j = 0; j < imp.mean_drop.size(); ++j)
            REQUIRE(imp.mean_drop[j] == 0.0);
    }

    SECTION("identity-cached replay reproduces the plain evaluation") {
        // the override path itself must not perturb metrics
        std::vector<std::vector<TensorT<float>>> cache;
        auto plain = evaluate(net, data.test, data.test_regions, 4, {}, &cache);
        std::vector<TensorT<float>> held;
        auto override_fn = [&](std::size_t block, std::size_t first) -> const TensorT<float>* {
            return &cache[block][first / 4];
        };
        auto replay = evaluate<float>(net, data.test, data.test_regions, 4, override_fn);
        for (std::size_t t = 0; t < plain.values.size(); ++t)
            REQUIRE(replay.values[t] == Catch::Approx(plain.values[t]).margin(1e-7));
        (void)held;
    }

    SECTION("noise blocks sit inside the measurement noise floor") {
        // Replace one block's output with seeded noise, uncorrelated with the
        // labels; permuting it across the dataset must not shift delta_m
        // beyond the spread estimated from repeated permutations.
        const std::size_t block = 5;
        const std::size_t count = data.test.size();
        CounterRng nrng(31);
        std::vector<TensorT<float>> noise;
        for (std::size_t i = 0; i < count; ++i) {
            TensorT<float> t({cfg.dv, scene.height, scene.width});
            for (std::size_t k = 0; k < t.size(); ++k)
                t[k] = static_cast<float>(nrng.normal() * 0.1);
            noise.push_back(std::move(t));
        }
        auto batched = [&](const std::vector<std::size_t>& order, std::size_t first,
                           std::size_t n) {
            TensorT<float> bt({n, cfg.dv, scene.height, scene.width});
            const std::size_t per = cfg.dv * scene.height * scene.width;
            for (std::size_t b = 0; b < n; ++b) {
                const auto& src = noise[order.empty() ? first + b : order[first + b]];
                std::copy(src.data(), src.data() + per, bt.data() + b * per);
            }
            return bt;
        };
        std::vector<std::size_t> identity;
        std::vector<TensorT<float>> held;
        auto eval_with = [&](const std::vector<std::size_t>& order) {
            held.clear();
            auto override_fn = [&](std::size_t bj, std::size_t first) -> const TensorT<float>* {
                if (bj != block) return nullptr;
                held.push_back(batched(order, first, std::min<std::size_t>(4, count - first)));
                return &held.back();
            };
            return delta_m(evaluate<float>(net, data.test, data.test_regions, 4, override_fn),
                           baseline);
        };
        const double base_dm = eval_with(identity);
        std::vector<double> drops;
        CounterRng prng(33);
        for (int rep = 0; rep < 20; ++rep) {
            std::vector<std::size_t> perm(count);
            for (std::size_t i = 0; i < count; ++i) perm[i] = i;
            for (std::size_t i = count; i > 1; --i) std::swap(perm[i - 1], perm[prng.below(i)]);
            drops.push_back(base_dm - eval_with(perm));
        }
        double mean = 0;
        for (double d : drops) mean += d / drops.size();
        double var = 0;
        for (double d : drops) var += (d - mean) * (d - mean) / drops.size();
        const double bound = 3.0 * std::sqrt(var) + 1e-6;
        REQUIRE(std::abs(mean) < bound);
    }
}

TEST_CASE("per-block agreement feeds the importance correlation") {
    using C = ContextType;
    std::vector<std::vector<C>> runs{
        {C::kGlobal, C::kLocal, C::kNone, C::kGlobal},
        {C::kGlobal, C::kLocal, C::kSLabel, C::kLocal},
        {C::kGlobal, C::kNone, C::kTLabel, C::kNone},
    };
    auto agree = per_block_agreement(runs);
    REQUIRE(agree[0] == Catch::Approx(1.0));
    REQUIRE(agree[1] == Catch::Approx(1.0 / 3.0));
    REQUIRE(agree[2] == Catch::Approx(0.0));
    REQUIRE(agree[3] == Catch::Approx(0.0));

    std::vector<double> importance{0.9, 0.4, 0.1, 0.05};
    const double r = pearson_correlation(importance, agree);
    REQUIRE(r > 0.8);  // aligned by construction
}

TEST_CASE("importance matrix heatmap export") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "atrc_matrix_test";
    fs::create_directories(dir);
    std::vector<double> m{0.0, 0.5, 1.0, 0.25};
    const std::string p1 = (dir / "m1.pgm").string(), p2 = (dir / "m2.pgm").string();
    export_matrix_pgm(m, 2, p1);
    export_matrix_pgm(m, 2, p2);
    REQUIRE(read_file_bytes(p1) == read_file_bytes(p2));
    auto bytes = read_file_bytes(p1);
    REQUIRE(bytes.size() > 2ul * 24 * 2 * 24);
    fs::remove_all(dir);
}
