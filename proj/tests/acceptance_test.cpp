// Acceptance gate: one test per shipping criterion, kept deliberately
// independent of the unit suites — reference implementations are restated
// here the slow and obvious way rather than shared.

#include <gtest/gtest.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "grad_check.hpp"
#include "mars/cli.hpp"

namespace mars {
namespace {

namespace fs = std::filesystem;
using mars::testing::check_gradients;

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("mars_accept_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  EXPECT_TRUE(in.good()) << path;
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double elapsed_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor random_map(std::vector<int> shape, uint64_t seed) {
  auto rng = seeded_rng(seed, "accept.map");
  return Tensor::uniform(std::move(shape), -2, 2, rng);
}

GroundTruthBox centered_box(real cx, real cy, real w, real h, int cls) {
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, cls};
}

void make_bn_identity(ResidualBlockParams& p) {
  p.bn_eps = 0.0;
  p.bn1_gamma.value.fill(1.0);
  p.bn1_beta.value.fill(0.0);
  p.bn2_gamma.value.fill(1.0);
  p.bn2_beta.value.fill(0.0);
  p.bn1_mean.fill(0.0);
  p.bn1_var.fill(1.0);
  p.bn2_mean.fill(0.0);
  p.bn2_var.fill(1.0);
}

// ---------------------------------------------------------------------------
// Independent references.
// ---------------------------------------------------------------------------

std::vector<Detection> reference_nms(std::vector<Detection> dets, real thr) {
  std::sort(dets.begin(), dets.end(), detection_order);
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (k.class_id == d.class_id && detection_iou(k, d) >= thr) suppressed = true;
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

struct RefPoint {
  real precision, recall;
  bool tp;
};

std::vector<RefPoint> reference_curve(std::vector<ScoredBox> dets,
                                      std::vector<std::vector<std::array<real, 4>>> gt,
                                      real thr) {
  std::sort(dets.begin(), dets.end(), scored_box_order);
  int total_gt = 0;
  std::vector<std::vector<bool>> used(gt.size());
  for (size_t i = 0; i < gt.size(); ++i) {
    used[i].assign(gt[i].size(), false);
    total_gt += static_cast<int>(gt[i].size());
  }
  std::vector<RefPoint> curve;
  int tp = 0;
  for (size_t d = 0; d < dets.size(); ++d) {
    const auto& s = dets[d];
    int pick = -1;
    real pick_iou = 0;
    for (size_t g = 0; g < gt[s.image].size(); ++g) {
      if (used[s.image][g]) continue;
      const real v = box_iou(s.x_min, s.y_min, s.x_max, s.y_max, gt[s.image][g][0],
                             gt[s.image][g][1], gt[s.image][g][2], gt[s.image][g][3]);
      if (v > pick_iou) {
        pick_iou = v;
        pick = static_cast<int>(g);
      }
    }
    const bool hit = pick >= 0 && pick_iou >= thr;
    if (hit) {
      used[s.image][static_cast<size_t>(pick)] = true;
      ++tp;
    }
    curve.push_back({static_cast<real>(tp) / static_cast<real>(d + 1),
                     total_gt ? static_cast<real>(tp) / total_gt : real(0), hit});
  }
  return curve;
}

real reference_ap(const std::vector<ScoredBox>& dets,
                  const std::vector<std::vector<std::array<real, 4>>>& gt, real thr) {
  int total_gt = 0;
  for (const auto& g : gt) total_gt += static_cast<int>(g.size());
  if (total_gt == 0 || dets.empty()) return 0;
  const auto curve = reference_curve(dets, gt, thr);
  real ap = 0, prev = 0;
  for (size_t i = 0; i < curve.size(); ++i) {
    if (!curve[i].tp) continue;
    real best = 0;
    for (size_t j = 0; j < curve.size(); ++j)
      if (curve[j].recall >= curve[i].recall) best = std::max(best, curve[j].precision);
    ap += (curve[i].recall - prev) * best;
    prev = curve[i].recall;
  }
  return ap;
}

LossBreakdown naive_detection_loss(const std::array<Tensor, 3>& raw,
                                   const std::vector<TargetAssignment>& targets,
                                   const ModelConfig& cfg) {
  auto bce = [](real z, real y) {
    const real s = 1.0 / (1.0 + std::exp(-z));
    return -(y * std::log(s) + (1 - y) * std::log(1 - s));
  };
  auto sig = [](real z) { return 1.0 / (1.0 + std::exp(-z)); };
  LossBreakdown lb;
  const int B = static_cast<int>(targets.size());
  for (int s = 0; s < 3; ++s) {
    const int G = cfg.grid(s);
    for (int b = 0; b < B; ++b) {
      const auto& sc = targets[static_cast<size_t>(b)].scales[static_cast<size_t>(s)];
      for (int a = 0; a < kAnchorsPerScale; ++a) {
        const int base = a * (5 + cfg.num_classes);
        for (int i = 0; i < G; ++i)
          for (int j = 0; j < G; ++j) {
            if (sc.obj_mask(a, i, j) != 0) {
              const real dx = sig(raw[s](b, base + 0, i, j)) - sc.box(a, 0, i, j);
              const real dy = sig(raw[s](b, base + 1, i, j)) - sc.box(a, 1, i, j);
              const real dw = raw[s](b, base + 2, i, j) - sc.box(a, 2, i, j);
              const real dh = raw[s](b, base + 3, i, j) - sc.box(a, 3, i, j);
              lb.box += dx * dx + dy * dy + dw * dw + dh * dh;
              lb.obj += bce(raw[s](b, base + 4, i, j), 1.0);
              for (int c = 0; c < cfg.num_classes; ++c)
                lb.cls += bce(raw[s](b, base + 5 + c, i, j), sc.cls(a, c, i, j));
            } else if (sc.ignore_mask(a, i, j) == 0) {
              lb.obj += bce(raw[s](b, base + 4, i, j), 0.0);
            }
          }
      }
    }
  }
  lb.box /= B;
  lb.obj /= B;
  lb.cls /= B;
  lb.total = lb.box + lb.obj + lb.cls;
  return lb;
}

// ---------------------------------------------------------------------------
// Shared fixtures for the slow end-to-end checks.
// ---------------------------------------------------------------------------

ModelConfig toy_cfg() {
  ModelConfig cfg;
  cfg.backbone = "toy";
  cfg.input_size = 64;
  cfg.domain_feat_channels = 8;
  return cfg;
}

std::vector<TrainExample> examples_of(const DatasetManifest& m, int input_size) {
  std::vector<TrainExample> out;
  for (const auto& rec : m.images) out.push_back(to_train_example(rec, input_size));
  return out;
}

struct OverfitRun {
  Model model;
  DatasetManifest manifest;
  std::vector<TrainExample> data;
  real final_map = 0;
  long steps = 0;
  double seconds = 0;
};

// Trains once per process; both the overfit and the degradation checks read it.
const OverfitRun& overfit_run() {
  static OverfitRun r = [] {
    OverfitRun run;
    run.manifest = generate_synthetic_dataset(8, 64, 21);
    run.data = examples_of(run.manifest, 64);

    ModelConfig cfg = toy_cfg();
    run.model = build_model(cfg, 3);

    TrainConfig tc;
    tc.learning_rate = 3e-3;
    tc.batch_size = 4;
    tc.epochs = 1000;  // the step cap is what actually bounds the run
    tc.seed = 3;

    EvalThresholds th;
    FitOptions opt;
    opt.max_steps = 2000;
    opt.eval_interval = 5;
    opt.target_map = 0.95;
    opt.evaluate = [&](Model& m) { return evaluate(m, run.data, th).map; };

    const auto t0 = std::chrono::steady_clock::now();
    const auto history = fit(run.model, run.data, tc, opt);
    run.seconds = elapsed_since(t0);
    run.steps = static_cast<long>(history.size()) * 2;  // 8 images / batch 4
    run.final_map = evaluate(run.model, run.data, th).map;
    return run;
  }();
  return r;
}

// ---------------------------------------------------------------------------
// Markdown table parsing for the ablation structure check.
// ---------------------------------------------------------------------------

struct ParsedRow {
  std::string label;
  std::array<std::string, 6> cells;  // as rendered, bold markers included
};

struct ParsedTable {
  std::vector<std::string> header;
  std::vector<ParsedRow> rows;
};

std::vector<std::string> split_md_row(const std::string& line) {
  std::vector<std::string> cells;
  size_t pos = line.find('|');
  while (pos != std::string::npos) {
    const size_t next = line.find('|', pos + 1);
    if (next == std::string::npos) break;
    std::string cell = line.substr(pos + 1, next - pos - 1);
    const size_t a = cell.find_first_not_of(' ');
    const size_t b = cell.find_last_not_of(' ');
    cells.push_back(a == std::string::npos ? "" : cell.substr(a, b - a + 1));
    pos = next;
  }
  return cells;
}

ParsedTable parse_md_table(const std::string& text) {
  ParsedTable table;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_md_row(line);
    EXPECT_EQ(cells.size(), 7u) << "bad table line: " << line;
    if (lineno == 0) {
      table.header = cells;
    } else if (lineno >= 2) {  // line 1 is the --- separator
      ParsedRow row;
      row.label = cells[0];
      for (int c = 0; c < 6; ++c) row.cells[static_cast<size_t>(c)] = cells[static_cast<size_t>(c) + 1];
      table.rows.push_back(std::move(row));
    }
    ++lineno;
  }
  return table;
}

bool is_bold(const std::string& cell) {
  return cell.size() > 4 && cell.substr(0, 2) == "**" && cell.substr(cell.size() - 2) == "**";
}

std::string strip_bold(const std::string& cell) {
  return is_bold(cell) ? cell.substr(2, cell.size() - 4) : cell;
}

// Every numeric column's bold cells must be exactly the maxima of the
// displayed values, failed rows excluded, ties all bold.
void expect_bold_matches_column_maxima(const ParsedTable& table) {
  for (int c = 0; c < 6; ++c) {
    real best = -1;
    bool any = false;
    for (const auto& row : table.rows) {
      if (row.cells[static_cast<size_t>(c)] == "failed") continue;
      best = std::max(best, std::stod(strip_bold(row.cells[static_cast<size_t>(c)])));
      any = true;
    }
    if (!any) continue;
    for (const auto& row : table.rows) {
      const std::string& cell = row.cells[static_cast<size_t>(c)];
      if (cell == "failed") continue;
      const bool should_be_bold = std::stod(strip_bold(cell)) == best;
      EXPECT_EQ(is_bold(cell), should_be_bold)
          << "column " << c << " row \"" << row.label << "\" cell \"" << cell << "\"";
    }
  }
}

const std::vector<std::string>& component_ladder() {
  static const std::vector<std::string> rows = {
      "Baseline (YOLOv3)",
      "+Residual",
      "+Channel Attention",
      "+Residual Attention",
      "+Multi-Scale Attention",
      "+Residual+Multi-Scale Attention",
      "+Channel Attention+Multi-Scale Attention",
      "+Residual+Channel Attention+Multi-Scale Attention",
  };
  return rows;
}

const std::vector<std::string>& domain_ladder() {
  static const std::vector<std::string> rows = {
      "Baseline (YOLOv3)",
      "+Domain",
      "+Domain +Residual",
      "+Domain +Channel Attention",
      "+Domain +Residual Attention",
      "+Domain +Multi-Scale Attention",
      "+Domain +Residual+Multi-Scale Attention",
      "+Domain +Channel Attention+Multi-Scale Attention",
      "+Domain +Residual+Channel Attention+Multi-Scale Attention",
  };
  return rows;
}

}  // namespace

// ---------------------------------------------------------------------------
// 1. Reference-table arithmetic.
// ---------------------------------------------------------------------------

TEST(Acceptance, TableArithmeticReproducesTheReferenceRows) {
  const real baseline =
      compute_map(std::array<real, 5>{0.8367, 0.7187, 0.5132, 0.6454, 0.0});
  EXPECT_NEAR(baseline * 100, 54.28, 0.005);

  const real best = compute_map(std::array<real, 5>{0.8477, 0.7534, 0.5712, 0.7228, 0.0335});
  EXPECT_NEAR(best * 100, 58.57, 0.005);
}

// ---------------------------------------------------------------------------
// 2. Finite-difference gradient checks for all five blocks, 20 seeds each.
// ---------------------------------------------------------------------------

TEST(Acceptance, BlockGradientsPassFiniteDifferenceChecks) {
  const auto t0 = std::chrono::steady_clock::now();
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    {
      auto p = ResidualBlockParams::init(3, seed, "rb.");
      Parameter x;
      x.name = "x";
      x.value = random_map({2, 3, 4, 4}, seed + 100);
      x.grad = Tensor(x.value.shape, 0.0);
      std::vector<Parameter*> params{&x};
      p.collect(params);
      auto build = [&](Tape& t) { return sum(t, residual_block_forward(t, t.param(x), p, true)); };
      auto rep = check_gradients(build, params);
      EXPECT_LT(rep.max_rel_err, 1e-4) << "residual seed " << seed << " at " << rep.worst;
    }
    {
      auto p = ChannelAttentionParams::init(4, 2, seed, "ca.");
      Parameter x;
      x.name = "x";
      x.value = random_map({2, 4, 5, 5}, seed + 200);
      x.grad = Tensor(x.value.shape, 0.0);
      std::vector<Parameter*> params{&x};
      p.collect(params);
      auto build = [&](Tape& t) { return sum(t, channel_attention_forward(t, t.param(x), p)); };
      auto rep = check_gradients(build, params);
      EXPECT_LT(rep.max_rel_err, 1e-4) << "channel attention seed " << seed << " at " << rep.worst;
    }
    {
      auto p = MultiScaleAttentionParams::init({2, 3, 4}, seed, "msa.");
      std::array<Parameter, 3> xs;
      std::vector<Parameter*> params;
      for (int s = 0; s < 3; ++s) {
        xs[s].name = "x" + std::to_string(s);
        xs[s].value = random_map({2, 2 + s, 3, 3}, seed + 300 + static_cast<uint64_t>(s));
        xs[s].grad = Tensor(xs[s].value.shape, 0.0);
        params.push_back(&xs[s]);
      }
      p.collect(params);
      auto build = [&](Tape& t) {
        std::array<Var, 3> in{t.param(xs[0]), t.param(xs[1]), t.param(xs[2])};
        auto out = multi_scale_attention_forward(t, in, p);
        Var total = sum(t, out[0]);
        total = add(t, total, sum(t, out[1]));
        return add(t, total, sum(t, out[2]));
      };
      auto rep = check_gradients(build, params);
      EXPECT_LT(rep.max_rel_err, 1e-4) << "multi-scale seed " << seed << " at " << rep.worst;
    }
    {
      auto rp = ResidualBlockParams::init(3, seed, "ra.res.");
      auto cp = ChannelAttentionParams::init(3, 2, seed, "ra.ca.");
      Parameter x;
      x.name = "x";
      x.value = random_map({2, 3, 4, 4}, seed + 400);
      x.grad = Tensor(x.value.shape, 0.0);
      std::vector<Parameter*> params{&x};
      rp.collect(params);
      cp.collect(params);
      auto build = [&](Tape& t) {
        return sum(t, residual_attention_forward(t, t.param(x), rp, cp, true));
      };
      auto rep = check_gradients(build, params);
      EXPECT_LT(rep.max_rel_err, 1e-4) << "fused seed " << seed << " at " << rep.worst;
    }
    {
      auto p = DomainClassifierParams::init(2, 3, 3, seed, "dc.");
      Parameter x;
      x.name = "x";
      x.value = random_map({2, 2, 8, 8}, seed + 500);
      x.grad = Tensor(x.value.shape, 0.0);
      std::vector<Parameter*> params{&x};
      p.collect(params);
      auto rng = seeded_rng(seed, "accept.dc-probe");
      Tensor probe = Tensor::uniform({2, 3}, -1, 1, rng);
      auto build = [&](Tape& t) {
        return weighted_sum(t, domain_classifier_forward(t, t.param(x), p), probe);
      };
      auto rep = check_gradients(build, params);
      EXPECT_LT(rep.max_rel_err, 1e-4) << "domain seed " << seed << " at " << rep.worst;
    }
  }
  EXPECT_LT(elapsed_since(t0), 120.0);
}

// ---------------------------------------------------------------------------
// 3. Exact analytic block behavior.
// ---------------------------------------------------------------------------

TEST(Acceptance, AnalyticCasesAreExactToMachinePrecision) {
  {  // zero branch: residual block is the identity
    auto p = ResidualBlockParams::init(3, 5, "rb.");
    make_bn_identity(p);
    p.conv2_w.value.fill(0.0);
    p.conv2_b.value.fill(0.0);
    Tensor x = random_map({2, 3, 4, 4}, 1);
    Tape t;
    Var y = residual_block_forward(t, t.leaf(x), p, false);
    for (int64_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y.value().data[i], x.data[i]);
  }
  {  // zero branch: fused residual attention is also the identity
    auto rp = ResidualBlockParams::init(3, 5, "ra.res.");
    auto cp = ChannelAttentionParams::init(3, 2, 5, "ra.ca.");
    make_bn_identity(rp);
    rp.conv2_w.value.fill(0.0);
    rp.conv2_b.value.fill(0.0);
    Tensor x = random_map({2, 3, 4, 4}, 2);
    Tape t;
    Var y = residual_attention_forward(t, t.leaf(x), rp, cp, false);
    for (int64_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y.value().data[i], x.data[i]);
  }
  {  // zero logits: channel attention gates at exactly one half
    auto p = ChannelAttentionParams::init(5, 2, 7, "ca.");
    p.expand_w.value.fill(0.0);
    p.expand_b.value.fill(0.0);
    Tensor x = random_map({2, 5, 3, 3}, 3);
    Tape t;
    Var y = channel_attention_forward(t, t.leaf(x), p);
    for (int64_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y.value().data[i], 0.5 * x.data[i]);
  }
  {  // zero logits: multi-scale attention halves every scale
    auto p = MultiScaleAttentionParams::init({3, 4, 5}, 9, "msa.");
    for (int s = 0; s < 3; ++s) {
      p.gate_w[s].value.fill(0.0);
      p.gate_b[s].value.fill(0.0);
    }
    std::array<Tensor, 3> xs{random_map({1, 3, 2, 2}, 4), random_map({1, 4, 3, 3}, 5),
                             random_map({1, 5, 4, 4}, 6)};
    Tape t;
    std::array<Var, 3> in{t.leaf(xs[0]), t.leaf(xs[1]), t.leaf(xs[2])};
    auto out = multi_scale_attention_forward(t, in, p);
    for (int s = 0; s < 3; ++s)
      for (int64_t i = 0; i < xs[s].numel(); ++i)
        EXPECT_DOUBLE_EQ(out[s].value().data[i], 0.5 * xs[s].data[i]);
  }
  {  // zero head: domain distribution is exactly uniform over 7
    auto p = DomainClassifierParams::init(3, 8, 7, 5, "dc.");
    p.head_w.value.fill(0.0);
    p.head_b.value.fill(0.0);
    Tensor x = random_map({2, 3, 8, 8}, 7);
    Tape t;
    Var probs = domain_classifier_forward(t, t.leaf(x), p);
    ASSERT_EQ(probs.value().shape, (std::vector<int>{2, 7}));
    for (real v : probs.value().data) EXPECT_DOUBLE_EQ(v, 1.0 / 7.0);
  }
}

// ---------------------------------------------------------------------------
// 4. Oracle equivalence: NMS, AP, and the detection loss.
// ---------------------------------------------------------------------------

TEST(Acceptance, NmsApAndLossMatchIndependentReferences) {
  const auto t0 = std::chrono::steady_clock::now();

  {  // NMS on 120 random instances, exact
    auto rng = seeded_rng(7, "accept.nms");
    std::uniform_int_distribution<int> n_det(0, 25), cls(0, 4);
    std::uniform_real_distribution<real> coord(0, 60), size(5, 40), conf(0, 1);
    for (int trial = 0; trial < 120; ++trial) {
      std::vector<Detection> dets;
      for (int i = n_det(rng); i-- > 0;) {
        Detection d;
        d.x_min = coord(rng);
        d.y_min = coord(rng);
        d.x_max = d.x_min + size(rng);
        d.y_max = d.y_min + size(rng);
        d.class_id = cls(rng);
        d.confidence = conf(rng);
        dets.push_back(d);
      }
      const auto got = non_max_suppression(dets, 0.45);
      const auto want = reference_nms(dets, 0.45);
      ASSERT_EQ(got.size(), want.size()) << "trial " << trial;
      for (size_t i = 0; i < got.size(); ++i) {
        ASSERT_EQ(got[i].x_min, want[i].x_min) << "trial " << trial;
        ASSERT_EQ(got[i].confidence, want[i].confidence) << "trial " << trial;
        ASSERT_EQ(got[i].class_id, want[i].class_id) << "trial " << trial;
      }
    }
  }

  {  // AP on 120 random instances, exact
    auto rng = seeded_rng(99, "accept.ap");
    std::uniform_int_distribution<int> n_gt(0, 6), n_det(0, 8), imgs(1, 3);
    std::uniform_real_distribution<real> coord(0, 80), size(4, 30), conf(0, 1), jitter(-6, 6);
    std::bernoulli_distribution near_gt(0.6);
    for (int trial = 0; trial < 120; ++trial) {
      const int num_images = imgs(rng);
      std::vector<std::vector<std::array<real, 4>>> gt(static_cast<size_t>(num_images));
      for (auto& g : gt)
        for (int i = n_gt(rng); i-- > 0;) {
          const real x = coord(rng), y = coord(rng), w = size(rng), h = size(rng);
          g.push_back({x, y, x + w, y + h});
        }
      std::vector<ScoredBox> dets;
      for (int i = 0; i < num_images; ++i)
        for (int d = n_det(rng); d-- > 0;) {
          ScoredBox s;
          s.image = i;
          s.confidence = conf(rng);
          auto& gi = gt[static_cast<size_t>(i)];
          if (near_gt(rng) && !gi.empty()) {
            const auto& g = gi[static_cast<size_t>(rng() % gi.size())];
            s.x_min = g[0] + jitter(rng);
            s.y_min = g[1] + jitter(rng);
            s.x_max = g[2] + jitter(rng);
            s.y_max = g[3] + jitter(rng);
          } else {
            s.x_min = coord(rng);
            s.y_min = coord(rng);
            s.x_max = s.x_min + size(rng);
            s.y_max = s.y_min + size(rng);
          }
          dets.push_back(s);
        }
      ASSERT_EQ(compute_ap(dets, gt, 0.5), reference_ap(dets, gt, 0.5)) << "trial " << trial;
    }
  }

  {  // detection loss against the scalar loop on 20 instances
    const ModelConfig cfg = toy_cfg();
    TrainConfig tc;
    auto rng_boxes = seeded_rng(17, "accept.loss.boxes");
    std::uniform_real_distribution<real> size(6.0, 38.0), unit(0.0, 1.0);
    for (uint64_t trial = 0; trial < 20; ++trial) {
      const int B = 1 + static_cast<int>(trial % 3);
      std::vector<TargetAssignment> targets;
      for (int b = 0; b < B; ++b) {
        std::vector<GroundTruthBox> gt;
        const int n = 1 + static_cast<int>((trial + static_cast<uint64_t>(b)) % 3);
        for (int k = 0; k < n; ++k) {
          const real w = size(rng_boxes), h = size(rng_boxes);
          const real cx = w / 2 + unit(rng_boxes) * (64 - w);
          const real cy = h / 2 + unit(rng_boxes) * (64 - h);
          gt.push_back(centered_box(cx, cy, w, h, static_cast<int>(rng_boxes() % 5)));
        }
        targets.push_back(assign_targets(gt, cfg, tc));
      }
      auto rng = seeded_rng(trial, "accept.loss.logits");
      std::array<Tensor, 3> raw;
      for (int s = 0; s < 3; ++s)
        raw[s] =
            Tensor::uniform({B, cfg.out_channels(), cfg.grid(s), cfg.grid(s)}, -6.0, 6.0, rng);
      const auto got = detection_loss(raw, targets, cfg);
      const auto want = naive_detection_loss(raw, targets, cfg);
      EXPECT_NEAR(got.box, want.box, 1e-6 * std::max(real(1), want.box)) << "trial " << trial;
      EXPECT_NEAR(got.obj, want.obj, 1e-6 * std::max(real(1), want.obj)) << "trial " << trial;
      EXPECT_NEAR(got.cls, want.cls, 1e-6 * std::max(real(1), want.cls)) << "trial " << trial;
    }
  }

  EXPECT_LT(elapsed_since(t0), 120.0);
}

// ---------------------------------------------------------------------------
// 5. Target encoding is invertible through decoding.
// ---------------------------------------------------------------------------

TEST(Acceptance, TargetEncodingRoundTripsThroughDecoding) {
  ModelConfig cfg;
  TrainConfig tc;
  auto rng = seeded_rng(11, "accept.roundtrip");
  std::uniform_real_distribution<real> size(4.0, 300.0);
  std::uniform_real_distribution<real> unit(0.0, 1.0);
  for (int n = 0; n < 200; ++n) {
    const real w = size(rng), h = size(rng);
    const real cx = w / 2 + unit(rng) * (416 - w);
    const real cy = h / 2 + unit(rng) * (416 - h);
    const int cls = static_cast<int>(rng() % 5);
    const auto gt = centered_box(cx, cy, w, h, cls);
    const auto ta = assign_targets({gt}, cfg, tc);
    const auto decoded = decode_predictions(saturated_raw_from_assignment(ta, cfg), cfg, 0.5);
    ASSERT_EQ(decoded.size(), 1u);
    ASSERT_EQ(decoded[0].size(), 1u) << "box " << n;
    const Detection& d = decoded[0][0];
    EXPECT_EQ(d.class_id, cls) << "box " << n;
    auto rel = [](real got, real want) {
      return std::abs(got - want) / std::max({std::abs(want), std::abs(got), real(1)});
    };
    EXPECT_LT(rel(d.x_min, gt.x_min), 1e-4) << "box " << n;
    EXPECT_LT(rel(d.y_min, gt.y_min), 1e-4) << "box " << n;
    EXPECT_LT(rel(d.x_max, gt.x_max), 1e-4) << "box " << n;
    EXPECT_LT(rel(d.y_max, gt.y_max), 1e-4) << "box " << n;
  }
}

// ---------------------------------------------------------------------------
// 6. Overfit sanity on eight synthetic images.
// ---------------------------------------------------------------------------

TEST(Acceptance, ToyModelOverfitsEightSyntheticImages) {
  const OverfitRun& run = overfit_run();
  EXPECT_GE(run.final_map, 0.95) << "after " << run.steps << " steps";
  EXPECT_LE(run.steps, 2000);
  EXPECT_LE(run.seconds, 600.0);
}

// ---------------------------------------------------------------------------
// 7. The domain head learns the seven domains.
// ---------------------------------------------------------------------------

TEST(Acceptance, DomainHeadSeparatesTheSevenDomains) {
  auto base = generate_synthetic_dataset(4, 64, 21);
  auto augmented = build_augmented_dataset(base, std::vector<real>(6, 0.7), 21);
  auto data = examples_of(augmented, 64);
  ASSERT_EQ(data.size(), 28u);

  ModelConfig cfg = toy_cfg();
  cfg.use_domain = true;
  cfg.domain_feat_channels = 32;
  Model model = build_model(cfg, 3);

  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.batch_size = 7;
  tc.epochs = 250;  // 4 steps per epoch; the step cap bounds the run
  tc.seed = 3;
  tc.lambda_domain = 1.0;

  FitOptions opt;
  opt.max_steps = 1000;
  opt.eval_interval = 1;
  opt.target_map = 0.95;  // the hook returns domain accuracy, stop at the bar
  opt.evaluate = [&](Model& m) { return domain_accuracy(m, data); };
  const auto history = fit(model, data, tc, opt);

  const long steps = static_cast<long>(history.size()) * 4;  // 28 items / batch 7
  EXPECT_LE(steps, 1000);
  EXPECT_GE(domain_accuracy(model, data), 0.95) << "after " << steps << " steps";
}

// ---------------------------------------------------------------------------
// 8. Ablation matrix structure: four tables, exact labels, recomputed bolds.
// ---------------------------------------------------------------------------

TEST(Acceptance, AblationMatrixEmitsTheFourReferenceTables) {
  TempDir dir;
  cmd_synth({.out_dir = dir.file("data"), .images = 2, .size = 64, .seed = 21});

  nlohmann::json spec = {
      {"seed", 5},
      {"output_dir", dir.file("out")},
      {"model",
       {{"backbone", "toy"}, {"input_size", 64}, {"domain_feat_channels", 8}}},
      {"train", {{"learning_rate", 3e-3}, {"batch_size", 4}, {"epochs", 12}}},
      {"data", {{"train_manifest", dir.file("data/manifest.json")}}},
      {"ablation", {{"matrix", true}}},
  };
  {
    std::ofstream out(dir.file("spec.json"));
    out << spec.dump(2) << "\n";
  }
  cmd_ablate({.spec_path = dir.file("spec.json")});

  const std::string header =
      "| Model | Echinus | Starfish | Holoth. | Scallop | Waterweed | mAP |";
  const std::array<size_t, 4> expected_rows{8, 8, 9, 9};
  for (int k = 1; k <= 4; ++k) {
    SCOPED_TRACE("table" + std::to_string(k));
    const std::string text = read_file(dir.file("out/table" + std::to_string(k) + ".md"));
    EXPECT_EQ(text.substr(0, header.size()), header);

    const ParsedTable table = parse_md_table(text);
    ASSERT_EQ(table.rows.size(), expected_rows[static_cast<size_t>(k - 1)]);
    const auto& labels = k <= 2 ? component_ladder() : domain_ladder();
    for (size_t r = 0; r < labels.size(); ++r) EXPECT_EQ(table.rows[r].label, labels[r]);

    for (const auto& row : table.rows)
      for (const auto& cell : row.cells) EXPECT_NE(cell, "failed") << row.label;
    expect_bold_matches_column_maxima(table);
  }
}

// ---------------------------------------------------------------------------
// 9. Original validation never trails augmented by more than the margin.
// ---------------------------------------------------------------------------

TEST(Acceptance, OriginalDataScoresAtLeastAugmentedMinusMargin) {
  const OverfitRun& run = overfit_run();
  Model model = run.model;  // work on a copy, the fixture is shared

  EvalThresholds th;
  const real original_map = evaluate(model, run.data, th).map;

  auto augmented = build_augmented_dataset(run.manifest, std::vector<real>(6, 0.7), 21);
  const real augmented_map = evaluate(model, examples_of(augmented, 64), th).map;

  EXPECT_GE(original_map, augmented_map - 0.02)
      << "original " << original_map << " vs augmented " << augmented_map;
}

// ---------------------------------------------------------------------------
// 10. Bitwise determinism of checkpoints and tables.
// ---------------------------------------------------------------------------

TEST(Acceptance, IdenticalSeedsReproduceBitwiseIdenticalOutputs) {
  TempDir dir;
  cmd_synth({.out_dir = dir.file("data"), .images = 2, .size = 64, .seed = 21});

  nlohmann::json config = {
      {"seed", 5},
      {"output_dir", ""},
      {"model",
       {{"backbone", "toy"}, {"input_size", 64}, {"domain_feat_channels", 8}}},
      {"train", {{"learning_rate", 1e-3}, {"batch_size", 4}, {"epochs", 2}}},
      {"data", {{"train_manifest", dir.file("data/manifest.json")}}},
  };
  auto write_json = [&](const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path);
    out << j.dump(2) << "\n";
  };

  for (const char* run : {"a", "b"}) {
    nlohmann::json c = config;
    c["output_dir"] = dir.file(std::string("train_") + run);
    write_json(dir.file(std::string("train_") + run + ".json"), c);
    cmd_train({.config_path = dir.file(std::string("train_") + run + ".json")});
  }
  EXPECT_EQ(read_file(dir.file("train_a/final.ckpt")), read_file(dir.file("train_b/final.ckpt")));

  nlohmann::json ablation = config;
  ablation["ablation"] = {
      {"variants",
       nlohmann::json::array({{{"label", "Baseline (YOLOv3)"}, {"model", nlohmann::json::object()}},
                              {{"label", "+Residual"},
                               {"model", {{"use_residual", true}}}}})},
  };
  for (const char* run : {"a", "b"}) {
    nlohmann::json c = ablation;
    c["output_dir"] = dir.file(std::string("abl_") + run);
    write_json(dir.file(std::string("abl_") + run + ".json"), c);
    cmd_ablate({.spec_path = dir.file(std::string("abl_") + run + ".json")});
  }
  for (const std::string name :
       {"table1.md", "table1.csv", "table1/baseline_yolov3.ckpt", "table1/residual.ckpt"})
    EXPECT_EQ(read_file(dir.file("abl_a/" + name)), read_file(dir.file("abl_b/" + name)))
        << name;
}

}  // namespace mars
