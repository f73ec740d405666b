#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "deepbirads/data.hpp"
#include "deepbirads/metrics.hpp"
#include "test_util.hpp"

using namespace deepbirads;
using testutil::random_tensor;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("deepbirads_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

const char* kFixture =
    "case_id,view,image_path,lesion_id,descriptors,pathology\n"
    "P1,CC,img/p1_cc.png,2,Irregular;Spicular,MALIGNANT\n"
    "P1,MLO,img/p1_mlo.png,2,Irregular;Spicular,MALIGNANT\n"
    "P1,CC,img/p1_cc.png,1,Oval,BENIGN\n"
    "P1,MLO,img/p1_mlo.png,1,Oval,BENIGN\n"
    "P0,MLO,img/p0_mlo.png,1,Round;Circumscribed,BENIGN_WITHOUT_CALLBACK\n"
    "P0,CC,img/p0_cc.png,1,Round;Circumscribed,BENIGN\n";

}  // namespace

TEST(Metadata, GroupsViewsAndOrdersLesions) {
  auto recs = parse_metadata_csv(kFixture, DescriptorVocabulary::standard());
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].case_id, "P1");
  EXPECT_EQ(recs[0].cc_image_path, "img/p1_cc.png");
  EXPECT_EQ(recs[0].mlo_image_path, "img/p1_mlo.png");
  ASSERT_EQ(recs[0].lesions.size(), 2u);
  EXPECT_EQ(recs[0].lesions[0], (std::vector<std::string>{"Oval"}));
  EXPECT_EQ(recs[0].lesions[1], (std::vector<std::string>{"Irregular", "Spicular"}));
  EXPECT_EQ(recs[0].label, 1);
  EXPECT_EQ(recs[1].label, 0);
}

TEST(Metadata, FormatRoundTrip) {
  auto vocab = DescriptorVocabulary::standard();
  auto recs = parse_metadata_csv(kFixture, vocab);
  EXPECT_EQ(parse_metadata_csv(format_metadata_csv(recs), vocab), recs);
}

TEST(Metadata, ErrorsNameTheRow) {
  auto vocab = DescriptorVocabulary::standard();
  auto expect_row = [&](const std::string& body, const std::string& needle) {
    try {
      parse_metadata_csv(std::string(kMetadataHeader) + "\n" + body, vocab);
      FAIL() << body;
    } catch (const ValidationError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_row("A,CC,a.png,1,Round,BENIGN\n", "has no MLO view");
  expect_row("A,CC,a.png,1,Round,BENIGN\nA,MLO,b.png,1,Lobulated,BENIGN\n", "row 3");
  expect_row("A,CC,a.png,1,Round,BENIGN\nA,MLO,b.png,1,Round\n", "row 3: expected 6 columns");
  expect_row("A,LMO,a.png,1,Round,BENIGN\n", "unknown view");
  expect_row("A,CC,a.png,1,Round,UNSURE\n", "unknown pathology");
  EXPECT_THROW(parse_metadata_csv("id,view\n", vocab), ValidationError);
}

TEST(Pgm, DecodeExample) {
  std::string bytes = "P5\n2 2\n255\n";
  bytes += std::string{'\x00', '\x80', '\xff', '\x40'};
  auto t = decode_pgm(bytes).to_tensor();
  EXPECT_EQ(t.shape(), (Shape{1, 2, 2}));
  EXPECT_DOUBLE_EQ(t[0], 0.0);
  EXPECT_DOUBLE_EQ(t[1], 128.0 / 255.0);
  EXPECT_DOUBLE_EQ(t[2], 1.0);
  EXPECT_DOUBLE_EQ(t[3], 64.0 / 255.0);
  EXPECT_EQ(encode_pgm(decode_pgm(bytes)), bytes);
  EXPECT_THROW(decode_pgm("P5\n2 2\n255\n\x01"), IoError);
}

TEST(Png, EightAndSixteenBitRoundTrip) {
  auto dir = scratch("png");
  for (std::uint32_t maxv : {255u, 65535u}) {
    GrayImage img{3, 5, maxv, {}};
    for (std::size_t i = 0; i < 15; ++i) img.pixels.push_back(static_cast<std::uint16_t>((i * 4099) % (maxv + 1)));
    auto path = dir / ("x" + std::to_string(maxv) + ".png");
    write_png(path, img);
    auto back = read_png(path);
    EXPECT_EQ(back.height, 3u);
    EXPECT_EQ(back.width, 5u);
    EXPECT_EQ(back.max_value, maxv);
    EXPECT_EQ(back.pixels, img.pixels);
    auto t = load_image(path);
    EXPECT_DOUBLE_EQ(t[1], static_cast<double>(img.pixels[1]) / maxv);
  }
  EXPECT_THROW(load_image(dir / "missing.png"), IoError);
}

TEST(Resize, Examples) {
  auto img = Tensor::from({1, 2, 2}, {0.0, 1.0, 1.0, 0.0});
  auto r = resize(img, 3, 3);
  const double expect[9] = {0, 0.5, 1, 0.5, 0.5, 0.5, 1, 0.5, 0};
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(r[i], expect[i], 1e-15);
  auto same = resize(img, 2, 2);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(same[i], img[i]);
  auto one = resize(Tensor::from({1, 1, 1}, {0.3}), 2, 4);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(one[i], 0.3);
  EXPECT_THROW(resize_checked(img, 20, 20, 2), ConfigError);
  EXPECT_EQ(resize_checked(img, 16, 16, 2).shape(), (Shape{1, 16, 16}));
}

TEST(Resize, PreservesConstantAndRange) {
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    auto img = random_tensor({1, 3 + t % 5, 4 + t % 3}, rng, 0, 1);
    auto r = resize(img, 7 + t % 4, 9);
    double lo = 1, hi = 0;
    for (double v : img.data()) lo = std::min(lo, v), hi = std::max(hi, v);
    for (double v : r.data()) {
      EXPECT_GE(v, lo - 1e-15);
      EXPECT_LE(v, hi + 1e-15);
    }
  }
}

TEST(Flip, ExamplesAndInvolution) {
  auto img = Tensor::from({1, 2, 3}, {1, 2, 3, 4, 5, 6});
  auto h = flip_horizontal(img), v = flip_vertical(img);
  EXPECT_EQ(std::vector<double>(h.data().begin(), h.data().end()), (std::vector<double>{3, 2, 1, 6, 5, 4}));
  EXPECT_EQ(std::vector<double>(v.data().begin(), v.data().end()), (std::vector<double>{4, 5, 6, 1, 2, 3}));
  auto hh = flip_horizontal(h), vv = flip_vertical(v);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(hh[i], img[i]);
    EXPECT_EQ(vv[i], img[i]);
  }
}

TEST(Augment, NoPolicyIsIdentityAndZeroSigmaElasticIsIdentity) {
  Rng rng(2);
  auto img = random_tensor({1, 8, 8}, rng, 0, 1);
  auto same = augment(img, AugmentationPolicy{}, rng);
  for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_EQ(same[i], img[i]);
  auto warped = elastic_deform(img, 0.0, 4, rng);
  for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_NEAR(warped[i], img[i], 1e-15);
}

TEST(Augment, DeterministicAndInRange) {
  AugmentationPolicy p;
  p.hflip = p.vflip = p.elastic = p.gaussian_noise = true;
  p.elastic_sigma = 3.0;
  p.noise_sigma = 0.3;
  Rng src(3);
  auto img = random_tensor({1, 16, 16}, src, 0, 1);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng a(seed), b(seed);
    auto x = augment(img, p, a), y = augment(img, p, b);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      EXPECT_EQ(x[i], y[i]);
      EXPECT_GE(x[i], 0.0);
      EXPECT_LE(x[i], 1.0);
    }
  }
}

TEST(Folds, SixFourExample) {
  std::vector<int> labels{1, 1, 1, 1, 1, 1, 0, 0, 0, 0};
  auto plan = stratified_kfold(labels, 2, 7);
  ASSERT_EQ(plan.folds.size(), 2u);
  for (const auto& f : plan.folds) {
    EXPECT_EQ(f.size(), 5u);
    std::size_t pos = 0;
    for (auto i : f) pos += labels[i];
    EXPECT_EQ(pos, 3u);
  }
  EXPECT_THROW(stratified_kfold(labels, 5, 7), ValidationError);
  EXPECT_THROW(stratified_kfold(labels, 1, 7), ValidationError);
}

TEST(Folds, PartitionAndStratificationProperty) {
  std::mt19937_64 gen(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 20 + gen() % 200, k = 2 + gen() % 9;
    std::vector<int> labels(n);
    for (auto& l : labels) l = gen() % 3 == 0;
    std::size_t n_pos = std::count(labels.begin(), labels.end(), 1);
    if (n_pos < k || n - n_pos < k) continue;
    auto plan = stratified_kfold(labels, k, gen());
    std::vector<int> seen(n, 0);
    std::size_t min_size = n, max_size = 0;
    for (std::size_t f = 0; f < k; ++f) {
      std::size_t pos = 0;
      for (auto i : plan.folds[f]) ++seen[i], pos += labels[i];
      min_size = std::min(min_size, plan.folds[f].size());
      max_size = std::max(max_size, plan.folds[f].size());
      EXPECT_LE(std::abs(static_cast<double>(pos) - static_cast<double>(n_pos) / k), 1.0);
      auto train = plan.train_indices(f);
      EXPECT_EQ(train.size() + plan.folds[f].size(), n);
    }
    EXPECT_LE(max_size - min_size, 1u);
    for (int s : seen) EXPECT_EQ(s, 1);
    auto again = stratified_kfold(labels, k, plan.seed);
    EXPECT_EQ(again.folds, plan.folds);
  }
}

TEST(Synth, DeterministicAndByteIdenticalOnDisk) {
  SynthOptions o;
  o.n_cases = 12;
  o.seed = 9;
  o.image_size = 32;
  auto a = scratch("synth_a"), b = scratch("synth_b");
  synth_generate(o, a);
  synth_generate(o, b);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    auto rel = fs::relative(e.path(), a);
    EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
  }
  EXPECT_EQ(files, 2 * 12 + 2u);
  auto ds = load_dataset(a, DescriptorVocabulary::standard(), 16, 0);
  auto mem = synth_dataset(o, DescriptorVocabulary::standard(), 16);
  ASSERT_EQ(ds.size(), mem.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(ds.samples[i].label, mem.samples[i].label);
    for (std::size_t p = 0; p < ds.samples[i].cc.numel(); ++p) ASSERT_EQ(ds.samples[i].cc[p], mem.samples[i].cc[p]);
    EXPECT_EQ(ds.samples[i].attributes.as_tensor().shape(), mem.samples[i].attributes.as_tensor().shape());
  }
  o.seed = 10;
  auto c = scratch("synth_c");
  synth_generate(o, c);
  EXPECT_NE(slurp(a / "metadata.csv"), slurp(c / "metadata.csv"));
}

TEST(Synth, RejectsBadOptions) {
  SynthOptions o;
  o.alpha = 1.5;
  EXPECT_THROW(synth_cases(o), ValidationError);
  o.alpha = 0.5;
  o.image_size = 4;
  EXPECT_THROW(synth_cases(o), ValidationError);
}

namespace {

// Shape and margin one-hots (OR over lesions): columns Round, Oval,
// Irregular, Circumscribed, Obscured, Ill-defined, Spicular.
std::vector<std::array<double, 7>> descriptor_features(const Dataset& ds) {
  auto vocab = DescriptorVocabulary::standard();
  const std::array<const char*, 7> cols{"Round", "Oval", "Irregular", "Circumscribed", "Obscured", "Ill-defined",
                                        "Spicular"};
  std::vector<std::array<double, 7>> out;
  for (const auto& s : ds.samples) {
    std::array<double, 7> f{};
    for (const auto& l : s.attributes.lesions)
      for (std::size_t c = 0; c < 7; ++c)
        if (l.values[vocab.index_of(cols[c])] != 0.0) f[c] = 1.0;
    out.push_back(f);
  }
  return out;
}

// Plain batch-gradient logistic regression fitted on the first `fit` cases
// and scored on the rest, or on everything when `fit` is 0.
double logistic_oracle_auc(const Dataset& ds, std::size_t fit = 0) {
  auto x = descriptor_features(ds);
  auto y = ds.labels();
  const std::size_t half = fit ? fit : x.size();
  const std::size_t from = fit ? fit : 0;
  std::array<double, 8> w{};
  for (int it = 0; it < 2000; ++it) {
    std::array<double, 8> g{};
    for (std::size_t i = 0; i < half; ++i) {
      double z = w[7];
      for (std::size_t c = 0; c < 7; ++c) z += w[c] * x[i][c];
      const double r = 1.0 / (1.0 + std::exp(-z)) - y[i];
      for (std::size_t c = 0; c < 7; ++c) g[c] += r * x[i][c];
      g[7] += r;
    }
    for (std::size_t c = 0; c < 8; ++c) w[c] -= 0.5 * g[c] / half;
  }
  std::vector<double> scores;
  std::vector<int> labels;
  for (std::size_t i = from; i < x.size(); ++i) {
    double z = w[7];
    for (std::size_t c = 0; c < 7; ++c) z += w[c] * x[i][c];
    scores.push_back(z);
    labels.push_back(y[i]);
  }
  return auc(scores, labels);
}

}  // namespace

TEST(Synth, FaithfulDescriptorsPredictTheLabel) {
  SynthOptions o;
  o.n_cases = 500;
  o.alpha = 1.0;
  o.image_size = 8;
  auto ds = synth_dataset(o, DescriptorVocabulary::standard(), 14);
  EXPECT_GT(logistic_oracle_auc(ds), 0.9) << logistic_oracle_auc(ds);
  EXPECT_GT(logistic_oracle_auc(ds, 250), 0.85) << logistic_oracle_auc(ds, 250);
  auto labels = ds.labels();
  auto pos = std::count(labels.begin(), labels.end(), 1);
  EXPECT_GT(pos, 200);
  EXPECT_LT(pos, 300);
}

TEST(Synth, RandomDescriptorsCarryNoSignal) {
  SynthOptions o;
  o.n_cases = 2000;
  o.alpha = 0.0;
  o.image_size = 8;
  auto ds = synth_dataset(o, DescriptorVocabulary::standard(), 14);
  auto x = descriptor_features(ds);
  auto y = ds.labels();
  const double n = static_cast<double>(x.size());
  double my = 0;
  for (int l : y) my += l;
  my /= n;
  for (std::size_t c = 0; c < 7; ++c) {
    double mx = 0, sxy = 0, sxx = 0, syy = 0;
    for (const auto& r : x) mx += r[c];
    mx /= n;
    for (std::size_t i = 0; i < x.size(); ++i) {
      sxy += (x[i][c] - mx) * (y[i] - my);
      sxx += (x[i][c] - mx) * (x[i][c] - mx);
      syy += (y[i] - my) * (y[i] - my);
    }
    // 4.5 standard errors of a null correlation at n = 2000.
    EXPECT_LT(std::abs(sxy / std::sqrt(sxx * syy)), 0.1) << c;
  }
  EXPECT_LT(std::abs(logistic_oracle_auc(ds) - 0.5), 0.06);
}
