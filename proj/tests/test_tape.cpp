#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "patchad/tape.hpp"

using namespace patchad;
namespace fs = std::filesystem;

namespace {

using Mat = Matrix<double>;

Mat random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

// Contract an arbitrary output with a fixed random weight so every entry contributes to the scalar.
Var probe(Tape<double>& t, Var y, const Mat& w) { return t.sum(t.mul(y, t.constant(w))); }

RotaryTable<double> random_rotations(Eigen::Index rows, Eigen::Index pairs, std::mt19937_64& rng) {
  const Mat a = random_mat(rows, pairs, rng, -3.0, 3.0);
  return {a.array().cos().matrix(), a.array().sin().matrix()};
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorCode::IoError;
}

constexpr double kTol = 1e-4;

}  // namespace

TEST(Ops, DenseExamples) {
  Tape<double> t;
  Mat x(2, 3), w(3, 2), b(1, 2);
  x << 1, 2, 3, 4, 5, 6;
  w << 1, 0, 0, 1, 1, 1;
  b << 0.5, -1;
  Mat expect(2, 2);
  expect << 1 + 3 + 0.5, 2 + 3 - 1, 4 + 6 + 0.5, 5 + 6 - 1;
  EXPECT_EQ(t.value(t.dense(t.constant(x), t.constant(w), t.constant(b))), expect);
  EXPECT_EQ(t.value(t.dense(t.constant(x), t.constant(Mat::Identity(3, 3)), t.constant(Mat::Zero(1, 3)))), x);
  Mat zeros = Mat::Zero(2, 3);
  const Mat out = t.value(t.dense(t.constant(zeros), t.constant(w), t.constant(b)));
  EXPECT_EQ(out.row(0), b.row(0));
  EXPECT_EQ(out.row(1), b.row(0));
  EXPECT_EQ(code_of([&] { t.dense(t.constant(x), t.constant(Mat::Zero(2, 2)), t.constant(b)); }),
            ErrorCode::ShapeMismatch);
}

TEST(Ops, ElementwiseExamples) {
  Tape<double> t;
  EXPECT_EQ(t.value(t.elu_plus_one(t.constant(Mat::Zero(1, 1))))(0, 0), 1.0);
  EXPECT_EQ(t.value(t.sigmoid(t.constant(Mat::Zero(1, 1))))(0, 0), 0.5);
  Mat v(1, 2);
  v << 3, 4;
  const Mat n = t.value(t.l2_normalize_rows(t.constant(v)));
  EXPECT_NEAR(n(0, 0), 0.6, 1e-12);
  EXPECT_NEAR(n(0, 1), 0.8, 1e-12);
  Mat big(1, 2);
  big << -800, 800;
  const Mat s = t.value(t.sigmoid(t.constant(big)));
  EXPECT_GE(s(0, 0), 0.0);
  EXPECT_LE(s(0, 1), 1.0);
}

TEST(Ops, EluPlusOneStrictlyPositive) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-700.0, 700.0);
  std::normal_distribution<double> g(0.0, 3.0);
  Mat x(1000, 1000);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = (i % 2) ? u(rng) : g(rng);
  Tape<double> t;
  EXPECT_GT(t.value(t.elu_plus_one(t.constant(x))).minCoeff(), 0.0);
  Tape<float> tf;
  EXPECT_GT(tf.value(tf.elu_plus_one(tf.constant(x.cast<float>().cwiseMax(-80.f)))).minCoeff(), 0.0f);
}

TEST(Ops, NonFiniteIsReported) {
  Tape<double> t;
  Mat x(1, 1);
  x << std::numeric_limits<double>::quiet_NaN();
  EXPECT_EQ(code_of([&] { t.constant(x); }), ErrorCode::NonFinite);
  Tape<double> t2;
  EXPECT_EQ(code_of([&] { t2.backward(t2.constant(Mat::Zero(2, 1))); }), ErrorCode::NonScalarOutput);
}

TEST(GradCheck, QuadraticAndConstant) {
  ParameterSet<double> ps;
  Mat th(1, 2);
  th << 1, 2;
  auto& p = ps.add("theta", th);
  const double err = grad_check(ps, [&](Tape<double>& t) {
    Var x = t.param(p);
    return t.affine(t.sum(t.mul(x, x)), 0.5);
  });
  EXPECT_LT(err, 1e-9);
  EXPECT_NEAR(p.grad(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(p.grad(0, 1), 2.0, 1e-12);
  const double cerr = grad_check(ps, [&](Tape<double>& t) {
    t.param(p);
    return t.constant(Mat::Constant(1, 1, 3.0));
  });
  EXPECT_EQ(cerr, 0.0);
  EXPECT_EQ(p.grad.norm(), 0.0);
}

// Every op checked against central differences over 10 random shapes.
class OpGrad : public ::testing::TestWithParam<int> {};

TEST_P(OpGrad, MatchesCentralDifferences) {
  const int trial = GetParam();
  std::mt19937_64 rng(100 + trial);
  // Width 1 makes row normalization locally constant, so columns start at 2.
  std::uniform_int_distribution<int> dim(1, 6), wide(2, 6);
  const Eigen::Index r = dim(rng), c = wide(rng), k = dim(rng);

  ParameterSet<double> ps;
  auto& a = ps.add("a", random_mat(r, c, rng));
  auto& b = ps.add("b", random_mat(r, c, rng));
  auto& w = ps.add("w", random_mat(c, k, rng));
  auto& bias = ps.add("bias", random_mat(1, k, rng));
  auto& row = ps.add("row", random_mat(1, c, rng));
  auto& prob = ps.add("prob", random_mat(r, c, rng, 0.05, 0.95));
  const Mat wrc = random_mat(r, c, rng), wrk = random_mat(r, k, rng), wr1 = random_mat(r, 1, rng);

  auto check = [&](const char* name, auto&& program) {
    const double err = grad_check(ps, program);
    EXPECT_LE(err, kTol) << name << " r=" << r << " c=" << c << " k=" << k;
  };

  check("matmul", [&](Tape<double>& t) { return probe(t, t.matmul(t.param(a), t.param(w)), wrk); });
  check("dense", [&](Tape<double>& t) { return probe(t, t.dense(t.param(a), t.param(w), t.param(bias)), wrk); });
  check("add", [&](Tape<double>& t) { return probe(t, t.add(t.param(a), t.param(b)), wrc); });
  check("sub", [&](Tape<double>& t) { return probe(t, t.sub(t.param(a), t.param(b)), wrc); });
  check("mul", [&](Tape<double>& t) { return probe(t, t.mul(t.param(a), t.param(b)), wrc); });
  check("add_row", [&](Tape<double>& t) { return probe(t, t.add_row(t.param(a), t.param(row)), wrc); });
  check("affine", [&](Tape<double>& t) { return probe(t, t.affine(t.param(a), -1.5, 0.25), wrc); });
  check("linear_combination", [&](Tape<double>& t) {
    const Var terms[] = {t.param(a), t.param(b), t.param(a)};
    const double coeffs[] = {0.5, -2.0, 1.25};
    return probe(t, t.linear_combination(terms, coeffs), wrc);
  });
  check("elu_plus_one", [&](Tape<double>& t) { return probe(t, t.elu_plus_one(t.param(a)), wrc); });
  check("sigmoid", [&](Tape<double>& t) { return probe(t, t.sigmoid(t.param(a)), wrc); });
  check("relu", [&](Tape<double>& t) { return probe(t, t.relu(t.param(a)), wrc); });
  check("l2_normalize_rows", [&](Tape<double>& t) { return probe(t, t.l2_normalize_rows(t.param(a)), wrc); });
  check("concat_cols", [&](Tape<double>& t) {
    const Var parts[] = {t.param(a), t.param(b)};
    Mat wcat(r, 2 * c);
    wcat << wrc, wrc.reverse();
    return probe(t, t.concat_cols(parts), wcat);
  });
  check("slice_cols", [&](Tape<double>& t) {
    const Eigen::Index start = c > 1 ? 1 : 0;
    return probe(t, t.slice_cols(t.param(a), start, c - start), wrc.rightCols(c - start));
  });
  std::uniform_int_distribution<std::uint32_t> pick(0, static_cast<std::uint32_t>(r - 1));
  std::vector<std::uint32_t> rows(static_cast<std::size_t>(r + 2));
  for (auto& i : rows) i = pick(rng);
  const Mat wg = random_mat(static_cast<Eigen::Index>(rows.size()), c, rng);
  check("gather_rows", [&](Tape<double>& t) { return probe(t, t.gather_rows(t.param(a), rows), wg); });
  RowGroups groups;
  for (int gi = 0; gi < 3; ++gi) {
    std::vector<std::uint32_t> members;
    std::vector<double> weights;
    for (Eigen::Index i = 0; i < r; ++i)
      if (i == gi % r || rng() % 2) {
        members.push_back(static_cast<std::uint32_t>(i));
        weights.push_back(0.1 + static_cast<double>(rng() % 9) / 10.0);
      }
    groups.add(members, weights);
  }
  const Mat w3 = random_mat(3, c, rng);
  check("weighted_rows", [&](Tape<double>& t) { return probe(t, t.weighted_rows(t.param(a), groups), w3); });
  check("max_rows", [&](Tape<double>& t) { return probe(t, t.max_rows(t.param(a), groups), w3); });
  check("rowdot", [&](Tape<double>& t) { return probe(t, t.rowdot(t.param(a), t.param(b)), wr1); });
  check("mean", [&](Tape<double>& t) { return t.mean(t.mul(t.param(a), t.param(b))); });
  const Mat l1_target = random_mat(r, c, rng);
  check("l1_loss", [&](Tape<double>& t) { return t.l1_loss(t.param(a), l1_target); });
  Mat target = random_mat(r, c, rng);
  target.row(0).setZero();
  check("cosine_loss", [&](Tape<double>& t) { return t.cosine_loss(t.param(a), target); });
  Mat labels(r, c);
  for (Eigen::Index i = 0; i < labels.size(); ++i) labels.data()[i] = static_cast<double>(rng() % 2);
  check("bce_loss", [&](Tape<double>& t) { return t.bce_loss(t.param(prob), labels); });

  // Attention: 2 heads over d = 8 (2 pairs per head), positive maps via elu+1.
  const int heads = 2;
  const Eigen::Index d = 8, m = k + 1;
  auto& q = ps.add("q", random_mat(r, d, rng));
  auto& kk = ps.add("k", random_mat(m, d, rng));
  auto& v = ps.add("v", random_mat(m, d, rng));
  const auto qrot = random_rotations(r, d / 2, rng), krot = random_rotations(m, d / 2, rng);
  const Mat wa = random_mat(r, d, rng);
  check("rope_linear_attention", [&](Tape<double>& t) {
    Var qq = t.elu_plus_one(t.param(q)), kq = t.elu_plus_one(t.param(kk));
    return probe(t, t.rope_linear_attention(qq, kq, t.param(v), qrot, krot, heads), wa);
  });
}

INSTANTIATE_TEST_SUITE_P(RandomShapes, OpGrad, ::testing::Range(0, 10));

TEST(Attention, IdentityRotationMatchesDirectSum) {
  std::mt19937_64 rng(3);
  const Mat q = random_mat(4, 8, rng, 0.1, 1.0), k = random_mat(5, 8, rng, 0.1, 1.0), v = random_mat(5, 8, rng);
  RotaryTable<double> qr{Mat::Ones(4, 4), Mat::Zero(4, 4)}, kr{Mat::Ones(5, 4), Mat::Zero(5, 4)};
  Tape<double> t;
  const Mat y = t.value(t.rope_linear_attention(t.constant(q), t.constant(k), t.constant(v), qr, kr, 2));
  for (int i = 0; i < 4; ++i)
    for (int h = 0; h < 2; ++h) {
      Eigen::RowVectorXd num = Eigen::RowVectorXd::Zero(4);
      double den = 1e-6;
      for (int n = 0; n < 5; ++n) {
        const double s = q.row(i).segment(4 * h, 4).dot(k.row(n).segment(4 * h, 4));
        num += s * v.row(n).segment(4 * h, 4);
        den += s;
      }
      EXPECT_LT((y.row(i).segment(4 * h, 4) - num / den).norm(), 1e-12);
    }
}

TEST(Attention, SingleKeyIsScaledValue) {
  std::mt19937_64 rng(4);
  const Mat q = random_mat(3, 8, rng, 0.1, 1.0), k = random_mat(1, 8, rng, 0.1, 1.0), v = random_mat(1, 8, rng);
  RotaryTable<double> qr{Mat::Ones(3, 4), Mat::Zero(3, 4)}, kr{Mat::Ones(1, 4), Mat::Zero(1, 4)};
  Tape<double> t;
  const Mat y = t.value(t.rope_linear_attention(t.constant(q), t.constant(k), t.constant(v), qr, kr, 1));
  for (int i = 0; i < 3; ++i) {
    const double s = q.row(i).dot(k.row(0));
    EXPECT_LT((y.row(i) - s / (s + 1e-6) * v.row(0)).norm(), 1e-12);
  }
}

TEST(Losses, UnitValues) {
  Tape<double> t;
  Mat p(1, 3), aligned(1, 3), anti(1, 3), ortho(1, 3);
  p << 1, 2, 3;
  aligned << 2, 4, 6;
  anti << -1, -2, -3;
  ortho << 3, 0, -1;
  Var pv = t.constant(p);
  EXPECT_NEAR(t.value(t.cosine_loss(pv, aligned))(0, 0), -1.0, 1e-5);
  EXPECT_NEAR(t.value(t.cosine_loss(pv, anti))(0, 0), 0.0, 1e-5);
  EXPECT_NEAR(t.value(t.cosine_loss(pv, ortho))(0, 0), -0.5, 1e-5);
  EXPECT_EQ(t.value(t.cosine_loss(pv, Mat::Zero(1, 3)))(0, 0), 0.0);
  const Mat half = Mat::Constant(5, 1, 0.5);
  Mat lab(5, 1);
  lab << 0, 1, 1, 0, 1;
  EXPECT_NEAR(t.value(t.bce_loss(t.constant(half), lab))(0, 0), std::log(2.0), 1e-6);
  Mat o(2, 3), og(2, 3);
  o << 1, 0, 0, 0, 0, 0;
  og << 0, 0, 0, 0, 2, 0;
  EXPECT_DOUBLE_EQ(t.value(t.l1_loss(t.constant(o), og))(0, 0), 1.5);
}

TEST(Adam, ZeroGradientIsFixedPoint) {
  std::mt19937_64 rng(5);
  ParameterSet<double> ps;
  ps.add("x", random_mat(3, 4, rng));
  const Mat before = ps[0].value;
  AdamState<double> st;
  adam_step(ps, st);
  EXPECT_EQ(ps[0].value, before);
  EXPECT_EQ(st.step, 1);
}

TEST(Adam, FirstStepIsLrTimesSign) {
  std::mt19937_64 rng(6);
  ParameterSet<double> ps;
  ps.add("x", random_mat(4, 4, rng));
  ps[0].grad = random_mat(4, 4, rng, -5, 5);
  const Mat before = ps[0].value;
  AdamState<double> st;
  adam_step(ps, st);
  const Mat delta = ps[0].value - before;
  for (Eigen::Index i = 0; i < delta.size(); ++i) {
    const double gi = ps[0].grad.data()[i];
    EXPECT_NEAR(delta.data()[i], -1e-3 * (gi > 0 ? 1 : -1), 1e-3 * 1e-6);
  }
}

TEST(Adam, MatchesScalarOracleBitForBit) {
  std::mt19937_64 rng(7);
  ParameterSet<double> ps;
  ps.add("x", random_mat(5, 3, rng));
  ps.add("y", random_mat(1, 7, rng));
  auto oracle = ps.cast<double>();
  std::vector<std::vector<double>> m(2), v(2);
  for (int j = 0; j < 2; ++j) {
    m[j].assign(static_cast<std::size_t>(ps[j].value.size()), 0.0);
    v[j].assign(static_cast<std::size_t>(ps[j].value.size()), 0.0);
  }
  AdamState<double> st;
  const double b1 = 0.9, b2 = 0.999, lr = 1e-3, eps = 1e-8;
  for (int step = 1; step <= 2; ++step) {
    for (int j = 0; j < 2; ++j) ps[j].grad = random_mat(ps[j].value.rows(), ps[j].value.cols(), rng);
    adam_step(ps, st);
    for (int j = 0; j < 2; ++j)
      for (Eigen::Index i = 0; i < ps[j].value.size(); ++i) {
        const double gr = ps[j].grad.data()[i];
        double& mi = m[j][static_cast<std::size_t>(i)];
        double& vi = v[j][static_cast<std::size_t>(i)];
        mi = b1 * mi + (1 - b1) * gr;
        vi = b2 * vi + (1 - b2) * gr * gr;
        const double mhat = mi / (1 - std::pow(b1, step));
        const double vhat = vi / (1 - std::pow(b2, step));
        oracle[j].value.data()[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    for (int j = 0; j < 2; ++j) ASSERT_EQ(ps[j].value, oracle[j].value) << "step " << step;
  }
  ps[1].grad = Mat::Zero(2, 2);
  EXPECT_EQ(code_of([&] { adam_step(ps, st); }), ErrorCode::ShapeMismatch);
}

TEST(Params, DuplicateNamesRejected) {
  ParameterSet<float> ps;
  ps.add("a", Matrix<float>::Zero(1, 1));
  EXPECT_EQ(code_of([&] { ps.add("a", Matrix<float>::Zero(2, 2)); }), ErrorCode::BadConfig);
}

TEST(Checkpoint, RoundTripAndCorruption) {
  const fs::path dir = fs::path(PATCHAD_TEST_TMP) / "tape";
  fs::create_directories(dir);
  std::mt19937_64 rng(8);
  ParameterSet<float> ps;
  ps.add("enc.w1", random_mat(9, 4, rng).cast<float>());
  ps.add("head.bf", random_mat(1, 4, rng).cast<float>());
  const nlohmann::json meta = {{"epoch", 3}, {"seed", 11}};
  const auto path = dir / "model.ckpt";
  save_checkpoint(path, ps, meta);

  ParameterSet<float> back;
  back.add("enc.w1", Matrix<float>::Zero(9, 4));
  back.add("head.bf", Matrix<float>::Zero(1, 4));
  EXPECT_EQ(load_checkpoint(path, back), meta);
  EXPECT_EQ(back[0].value, ps[0].value);
  EXPECT_EQ(back[1].value, ps[1].value);

  ParameterSet<float> wrong;
  wrong.add("enc.w1", Matrix<float>::Zero(4, 9));
  wrong.add("head.bf", Matrix<float>::Zero(1, 4));
  EXPECT_EQ(code_of([&] { load_checkpoint(path, wrong); }), ErrorCode::ShapeMismatch);

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) {
    std::ofstream(dir / "bad.ckpt", std::ios::binary) << b;
    return dir / "bad.ckpt";
  };
  std::string v2 = bytes;
  v2[8] = 2;
  EXPECT_EQ(code_of([&] { load_checkpoint(write(v2), back); }), ErrorCode::VersionMismatch);
  EXPECT_EQ(code_of([&] { load_checkpoint(write(bytes.substr(0, bytes.size() - 3)), back); }), ErrorCode::CorruptFile);
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_EQ(code_of([&] { load_checkpoint(write(magic), back); }), ErrorCode::CorruptFile);
}
