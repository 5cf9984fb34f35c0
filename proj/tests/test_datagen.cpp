#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ivae/datagen.hpp"

using namespace ivae;

namespace {

GenConfig small_config(std::uint64_t seed = 3) {
    GenConfig c;
    c.M = 6;
    c.L = 200;
    c.n = 3;
    c.d = 4;
    c.seed = seed;
    return c;
}

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("ivae_datagen_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

double sample_var(const std::vector<double>& v) {
    double m = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
}

}  // namespace

TEST(Mixing, IdentityWeightsReproduceSources) {
    Mixing mix;
    mix.weights.push_back(Tensor::matrix({{1, 0}, {0, 1}}));
    mix.biases.push_back(Tensor::zeros({2}));
    Tensor z = Tensor::matrix({{0.3, -1.2}, {2.0, 0.0}, {-0.7, 5.5}});
    Tensor x = mix.apply(z);
    for (std::size_t i = 0; i < z.size(); ++i) EXPECT_EQ(x.values()[i], z.values()[i]);
}

TEST(Mixing, NoiselessObservationsAreTheMixedSources) {
    GenConfig c = small_config();
    c.noise_var = 0.0;
    const Dataset ds = generate_dataset(c);
    const Tensor clean = ds.mixing.apply(ds.z_star);
    for (std::size_t i = 0; i < clean.size(); ++i) ASSERT_EQ(ds.x.values()[i], clean.values()[i]);
}

TEST(Mixing, ConditionNumbersStayUnderTheGate) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        GenConfig c;
        c.n = 5;
        c.d = 5;
        const Mixing mix = make_mixing(c, seed);
        ASSERT_EQ(mix.weights.size(), c.mixing_layers);
        for (const auto& w : mix.weights) EXPECT_LT(condition_number(to_matrix(w)), 25.0) << "seed " << seed;
    }
}

TEST(Mixing, ImpossibleGateIsReported) {
    GenConfig c;
    c.max_condition = 1.0 + 1e-9;
    EXPECT_THROW(make_mixing(c, 0), NumericError);
}

// A leaky unit is bi-Lipschitz with lower constant `slope`, so the composite map expands
// distances by at least prod_l slope * sigma_min(W_l) (no slope on the last layer).
TEST(Mixing, InjectivityProbeRespectsLipschitzLowerBound) {
    GenConfig c;
    c.n = 5;
    c.d = 5;
    const Mixing mix = make_mixing(c, 17);
    double bound = 1.0;
    for (std::size_t l = 0; l < mix.weights.size(); ++l) {
        const auto s = Eigen::JacobiSVD<Eigen::MatrixXd>(to_matrix(mix.weights[l])).singularValues();
        bound *= s(s.size() - 1) * (l + 1 < mix.weights.size() ? c.mixing_slope : 1.0);
    }
    const std::size_t P = 20000;
    CounterRng rng(5, 0);
    std::vector<double> a(P * 5), b(P * 5);
    for (auto& v : a) v = 2 * rng.normal();
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = a[i] + (i % 2 == 0 ? 1e-3 : 1.0) * rng.normal();
    const RowMatrix fa = to_matrix(mix.apply(Tensor({P, 5}, a))), fb = to_matrix(mix.apply(Tensor({P, 5}, b)));
    const RowMatrix za = to_matrix(Tensor({P, 5}, a)), zb = to_matrix(Tensor({P, 5}, b));
    double worst = std::numeric_limits<double>::infinity();
    for (Eigen::Index r = 0; r < fa.rows(); ++r)
        worst = std::min(worst, (fa.row(r) - fb.row(r)).norm() / (za.row(r) - zb.row(r)).norm());
    EXPECT_GT(worst, 0.0);
    EXPECT_GE(worst, bound * (1 - 1e-9));
}

TEST(Mixing, CausalWeightsAreLowerTriangular) {
    GenConfig c = small_config();
    c.n = c.d = 2;
    c.variant = DataVariant::causal_sem;
    const Dataset ds = generate_dataset(c);
    for (const auto& w : ds.mixing.weights) EXPECT_EQ(to_matrix(w)(1, 0), 0.0);
}

TEST(Generate, SegmentVariancesMatchTheirParameters) {
    GenConfig c = small_config(9);
    c.M = 4;
    c.L = 5000;
    const Dataset ds = generate_dataset(c);
    const ExpFamilySpec spec{c.family, c.n};
    for (std::size_t m = 0; m < c.M; ++m) {
        const Moments mo = natural_to_moment(spec, ds.lambda_star[m]);
        for (std::size_t i = 0; i < c.n; ++i) {
            std::vector<double> col;
            double mean = 0;
            for (std::size_t r = m * c.L; r < (m + 1) * c.L; ++r) col.push_back(ds.z_star.at(r, i));
            for (double v : col) mean += v;
            mean /= static_cast<double>(col.size());
            EXPECT_NEAR(sample_var(col), mo.variance[i], 0.1 * mo.variance[i]) << m << "," << i;
            EXPECT_GE(mo.variance[i], c.var_lo - 1e-12);
            EXPECT_LE(mo.variance[i], c.var_hi + 1e-12);
            EXPECT_LT(std::abs(mean), 3 * std::sqrt(mo.variance[i] / static_cast<double>(c.L)));
        }
    }
}

TEST(Generate, EasyClassifyShiftsSecondCoordinateBySegment) {
    GenConfig c;
    c.M = 5;
    c.L = 2000;
    c.n = c.d = 2;
    c.family = Family::gaussian_mean_var;
    c.variant = DataVariant::easy_classify;
    c.seed = 4;
    const Dataset ds = generate_dataset(c);
    for (std::size_t m = 0; m < c.M; ++m) {
        std::vector<double> col;
        for (std::size_t r = m * c.L; r < (m + 1) * c.L; ++r) col.push_back(ds.x.at(r, 1));
        double mean = 0;
        for (double v : col) mean += v;
        mean /= static_cast<double>(col.size());
        const double se = std::sqrt(sample_var(col) / static_cast<double>(col.size()));
        EXPECT_NEAR(mean, 2.0 * static_cast<double>(m), 3 * se) << "segment " << m;
    }
}

TEST(Generate, LabelsAndOneHotAgree) {
    const Dataset ds = generate_dataset(small_config());
    ASSERT_EQ(ds.size(), 6u * 200u);
    std::vector<std::size_t> counts(6, 0);
    for (std::size_t r = 0; r < ds.size(); ++r) {
        ++counts[ds.segment[r]];
        double row = 0;
        for (std::size_t m = 0; m < 6; ++m) row += ds.u.at(r, m);
        EXPECT_EQ(row, 1.0);
        EXPECT_EQ(ds.u.at(r, ds.segment[r]), 1.0);
    }
    for (auto n : counts) EXPECT_EQ(n, 200u);
}

TEST(Generate, BernoulliObservationsAreBinary) {
    GenConfig c = small_config();
    c.observation = Observation::bernoulli;
    const Dataset ds = generate_dataset(c);
    double ones = 0;
    for (double v : ds.x.values()) {
        ASSERT_TRUE(v == 0.0 || v == 1.0);
        ones += v;
    }
    EXPECT_GT(ones, 0.0);
    EXPECT_LT(ones, static_cast<double>(ds.x.size()));
}

TEST(Generate, DeterministicPerSeed) {
    const auto a = generate_dataset(small_config(21)), b = generate_dataset(small_config(21)),
               c = generate_dataset(small_config(22));
    EXPECT_EQ(dataset_checksum(a), dataset_checksum(b));
    EXPECT_NE(dataset_checksum(a), dataset_checksum(c));
    for (std::size_t i = 0; i < a.x.size(); ++i) ASSERT_EQ(a.x.values()[i], b.x.values()[i]);
}

TEST(Generate, InvalidConfigsAreRejected) {
    GenConfig c = small_config();
    c.d = 2;  // d < n
    EXPECT_THROW(generate_dataset(c), ConfigError);
    c = small_config();
    c.M = 1;
    EXPECT_THROW(generate_dataset(c), ConfigError);
    c = small_config();
    c.variant = DataVariant::easy_classify;
    EXPECT_THROW(generate_dataset(c), ConfigError);
    c = small_config();
    c.noise_var = -1;
    EXPECT_THROW(generate_dataset(c), ConfigError);
}

TEST(DatasetFiles, RoundTripIsBitExact) {
    const auto dir = temp_dir("roundtrip");
    const Dataset ds = generate_dataset(small_config(8));
    const std::string sum = save_dataset(dir / "d", ds);
    EXPECT_EQ(sum, dataset_checksum(ds));
    const Dataset back = load_dataset(dir / "d");
    ASSERT_EQ(back.x.shape(), ds.x.shape());
    for (std::size_t i = 0; i < ds.x.size(); ++i) ASSERT_EQ(back.x.values()[i], ds.x.values()[i]);
    for (std::size_t i = 0; i < ds.z_star.size(); ++i) ASSERT_EQ(back.z_star.values()[i], ds.z_star.values()[i]);
    EXPECT_EQ(back.segment, ds.segment);
    EXPECT_EQ(back.lambda_star, ds.lambda_star);
    const Tensor m1 = ds.mixing.apply(ds.z_star), m2 = back.mixing.apply(back.z_star);
    for (std::size_t i = 0; i < m1.size(); ++i) ASSERT_EQ(m1.values()[i], m2.values()[i]);
    std::filesystem::remove_all(dir);
}

TEST(DatasetFiles, CorruptionIsDetected) {
    const auto dir = temp_dir("corrupt");
    save_dataset(dir / "d", generate_dataset(small_config()));
    {
        std::fstream f(dir / "d.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(3);
        f.put('\x7f');
    }
    EXPECT_THROW(load_dataset(dir / "d"), std::runtime_error);
    EXPECT_THROW(load_dataset(dir / "missing"), ConfigError);
    std::filesystem::remove_all(dir);
}

TEST(DatasetFiles, CsvHasHeaderAndOneRowPerPoint) {
    const auto dir = temp_dir("csv");
    const Dataset ds = generate_dataset(small_config());
    export_csv(dir / "d.csv", ds);
    std::ifstream in(dir / "d.csv");
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "segment,z1,z2,z3,x1,x2,x3,x4");
    std::size_t rows = 0;
    while (std::getline(in, line)) ++rows;
    EXPECT_EQ(rows, ds.size());
    std::filesystem::remove_all(dir);
}

// lambda(u) = (u, u^2) at u = 1, 2, 3 with u_0 = 1: columns (1, 3) and (2, 8).
TEST(LMatrix, QuadraticExample) {
    const std::vector<std::vector<double>> lam{{1, 1}, {2, 4}, {3, 9}};
    const auto res = check_assumption_iv(lam, 1, 2, 0);
    EXPECT_EQ(res.pivot, 0u);
    EXPECT_TRUE(res.invertible);
    EXPECT_NEAR(std::abs(res.L.determinant()), 2.0, 1e-12);
    Eigen::MatrixXd expect(2, 2);
    expect << 1, 2, 3, 8;
    for (std::size_t j = 0; j < 2; ++j) {
        const Eigen::Index src = res.chosen[j] == 1 ? 0 : 1;
        EXPECT_NEAR((res.L.col(static_cast<Eigen::Index>(j)) - expect.col(src)).norm(), 0.0, 1e-12);
    }
}

TEST(LMatrix, ConstantNaturalsAreDegenerate) {
    const std::vector<std::vector<double>> lam(5, std::vector<double>{-0.5, -0.25});
    const auto res = check_assumption_iv(lam, 2, 1);
    EXPECT_FALSE(res.invertible);
    EXPECT_EQ(res.smallest_singular, 0.0);
}

TEST(LMatrix, TooFewPointsIsAConfigError) {
    EXPECT_THROW(check_assumption_iv({{1, 1}, {2, 4}}, 1, 2), ConfigError);
    EXPECT_THROW(check_assumption_iv({{1, 1}, {2, 4}, {3, 9}}, 1, 2, 7), ConfigError);
}

TEST(LMatrix, GeneratedSegmentsSatisfyTheCondition) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        GenConfig c;
        c.M = 40;
        c.L = 1;
        c.n = c.d = 5;
        c.family = seed % 2 ? Family::gaussian_mean_var : Family::gaussian_var;
        c.seed = seed;
        const Dataset ds = generate_dataset(c);
        const auto res = check_assumption_iv(ds.lambda_star, c.n, stats_per_component(c.family));
        EXPECT_TRUE(res.invertible) << "seed " << seed;
        EXPECT_GT(res.smallest_singular, 0.0);
    }
}

TEST(LMatrix, VerdictIgnoresCandidateOrder) {
    GenConfig c;
    c.M = 12;
    c.L = 1;
    c.n = c.d = 3;
    c.seed = 2;
    auto lam = generate_dataset(c).lambda_star;
    const auto a = check_assumption_iv(lam, 3, 1);
    std::reverse(lam.begin(), lam.end());
    const auto b = check_assumption_iv(lam, 3, 1);
    EXPECT_EQ(a.invertible, b.invertible);
    EXPECT_NEAR(a.smallest_singular, b.smallest_singular, 1e-12);
}

TEST(Witness, IdentityRotationHasNoGap) {
    WitnessConfig w;
    w.identity_rotation = true;
    w.test_points = 20;
    const auto res = proposition3_witness(w);
    EXPECT_EQ(res.max_gap, 0.0);
}

TEST(Witness, LocationFamilyIsRotationInvariant) {
    WitnessConfig w;
    w.seed = 1;
    w.test_points = 50;
    const auto res = proposition3_witness(w);
    EXPECT_GT((res.rotation - Eigen::MatrixXd::Identity(2, 2)).norm(), 0.1);
    EXPECT_NEAR((res.rotation.transpose() * res.rotation - Eigen::MatrixXd::Identity(2, 2)).norm(), 0.0, 1e-12);
    EXPECT_LT(res.max_gap, 1e-6);
}

TEST(Witness, VarianceFamilyIsNotRotationInvariant) {
    WitnessConfig w;
    w.seed = 1;
    w.test_points = 50;
    w.family = Family::gaussian_var;
    const auto res = proposition3_witness(w);
    EXPECT_GT(res.max_gap, 0.1);
}

TEST(Witness, RejectsUnsupportedSettings) {
    WitnessConfig w;
    w.n = 3;
    EXPECT_THROW(proposition3_witness(w), ConfigError);
    w.n = 2;
    w.family = Family::gaussian_mean_var;
    EXPECT_THROW(proposition3_witness(w), ConfigError);
}
