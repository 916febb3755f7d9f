#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"

#include "sizefit/errors.hpp"
#include "sizefit/maskops.hpp"
#include "sizefit/synthdata.hpp"

#include "oracles.hpp"

using namespace sizefit;
using namespace sizefit::synth;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("size validation names the offending field") {
  SizeVector s = canonical_m();
  CHECK(validate(s).empty());
  s.body_width = -1;
  REQUIRE(validate(s).size() == 1);
  CHECK(validate(s)[0].rfind("body_width", 0) == 0);
  s = canonical_m();
  s.neck_size = s.shoulder_width + 1;
  CHECK_THROWS_AS(require_valid(s), DataError);
  CHECK(size_from_json(to_json(canonical_m())) == canonical_m());
}

TEST_CASE("grading scales width and sleeve only") {
  const SizeVector m = canonical_m();
  const SizeVector xl = graded(m, 2);
  CHECK(xl.body_width == doctest::Approx(m.body_width * 1.16));
  CHECK(xl.sleeve_length == doctest::Approx(m.sleeve_length * 1.16));
  CHECK(xl.shoulder_width == m.shoulder_width);
  CHECK(xl.neck_size == m.neck_size);
  CHECK(grading_step(SizeLabel::S) == -1);
  CHECK(size_from_name("XL") == SizeLabel::XL);
}

TEST_CASE("rendering is deterministic and internally consistent") {
  const BodyConfig b = sample_body(7, 3, 1);
  const Rendering r1 = render_person(b, garment_size(2, SizeLabel::L), 2);
  const Rendering r2 = render_person(b, garment_size(2, SizeLabel::L), 2);
  CHECK(r1.image == r2.image);
  CHECK(r1.mask == r2.mask);
  CHECK(r1.parts == r2.parts);
  for (int y = 0; y < kCanvas; ++y)
    for (int x = 0; x < kCanvas; ++x) {
      if (r1.mask(y, x) <= 0.5) continue;
      CHECK(r1.parts(y, x) != PartLabel::background);
      CHECK(r1.parts(y, x) != PartLabel::head);
    }
  const auto& head = r1.keypoints[geometry::Joint::head];
  CHECK(r1.parts(static_cast<int>(std::lround(head.y)), static_cast<int>(std::lround(head.x))) == PartLabel::head);
}

TEST_CASE("a vanishing sleeve leaves a torso-only garment") {
  const BodyConfig b = sample_body(7, 0, 0);
  SizeVector s = canonical_m();
  s.sleeve_length = 1e-6;
  const Rendering r = render_person(b, s, 0);
  CHECK(oracle::count(r.sleeves) == 0);
}

TEST_CASE("sleeve pixels stay near the arm") {
  const BodyConfig b = sample_body(7, 4, 0);
  const Rendering r = render_person(b, garment_size(1, SizeLabel::XL), 1);
  for (int y = 0; y < kCanvas; ++y)
    for (int x = 0; x < kCanvas; ++x) {
      if (r.sleeves(y, x) <= 0.5) continue;
      double best = 1e9;
      for (bool left : {true, false}) {
        const auto p = arm_path(b, left);
        for (int i = 0; i < 3; ++i) {
          const double vx = p[i + 1].x - p[i].x, vy = p[i + 1].y - p[i].y;
          const double t = std::clamp(((x - p[i].x) * vx + (y - p[i].y) * vy) / (vx * vx + vy * vy), 0.0, 1.0);
          best = std::min(best, std::hypot(x - p[i].x - t * vx, y - p[i].y - t * vy));
        }
      }
      CHECK(best <= b.sleeve_radius + 2.0);
    }
}

TEST_CASE("size-to-area monotonicity and nesting over a 1000-sample sweep") {
  const oracle::SweepResult r = oracle::size_sweep(1000, 99);
  INFO("skipped " << r.skipped);
  CHECK(r.checked == 1000);
  CHECK(r.width_failures == 0);
  CHECK(r.sleeve_failures == 0);
  CHECK(r.nesting_failures == 0);
}

TEST_CASE("pairs with equal sizes have a zero residual; growth pairs a non-negative one") {
  const BodyConfig b = sample_body(7, 2, 1);
  Rng rng(1);
  const SizeVector s = garment_size(3, SizeLabel::M);
  const PairedSample same = make_pair(b, 3, s, s, 0.0, rng);
  const ResidualMask none = residual_from(same.tryon.mask, same.ref.mask);
  for (double v : none.values()) CHECK(v == 0.0);

  SizeVector grown = s;
  for (double* f : {&grown.body_length_back, &grown.sleeve_length, &grown.shoulder_width, &grown.body_width,
                    &grown.neck_size})
    *f *= 1.1;
  const PairedSample up = make_pair(b, 3, s, grown, 0.0, rng);
  const ResidualMask growth = residual_from(up.tryon.mask, up.ref.mask);
  for (double v : growth.values()) CHECK(v >= 0.0);
}

TEST_CASE("pose jitter leaves the shoulders alone") {
  const BodyConfig b = sample_body(7, 1, 0);
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    const PairedSample p = make_pair(b, 0, garment_size(0, SizeLabel::M), garment_size(0, SizeLabel::L), 0.05, rng);
    CHECK(p.jittered);
    const double upper = geometry::posture_distance(p.ref.keypoints, p.tryon.keypoints,
                                                    geometry::JointSubset::above_shoulders);
    const double all = geometry::posture_distance(p.ref.keypoints, p.tryon.keypoints, geometry::JointSubset::all);
    CHECK(upper <= all);
  }
}

TEST_CASE("dataset planning") {
  DatasetConfig c;
  const auto plan = plan_dataset(c);
  std::map<std::string, int> per_split;
  for (const auto& e : plan) {
    ++per_split[e.split];
    if (e.split.rfind("test", 0) == 0) CHECK(e.ref_label != e.try_label);
  }
  CHECK(plan.size() == 1408);
  CHECK(per_split["train"] == 1008);
  CHECK(per_split["val"] == 112);
  CHECK(per_split["test_new_person"] == 120);
  CHECK(per_split["test_new_clothes"] == 168);

  DatasetConfig one = c;
  one.n_garments = 1;
  CHECK_THROWS_AS(plan_dataset(one), DataError);
  CHECK(dataset_config_from_json(to_json(c)).seed == c.seed);
}

TEST_CASE("dataset build is bit-reproducible") {
  DatasetConfig c;
  c.n_bodies = 3;
  c.n_garments = 3;
  c.sizes_per_garment = 2;
  c.n_poses = 1;
  c.jitter = 0.03;
  const fs::path root = fs::temp_directory_path() / "sizefit_test_synth";
  fs::remove_all(root);
  build_dataset(c, root / "a");
  build_dataset(c, root / "b");
  std::size_t files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(root / "a")) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), root / "a");
    REQUIRE(fs::exists(root / "b" / rel));
    CHECK(slurp(entry.path()) == slurp(root / "b" / rel));
    ++files;
  }
  CHECK(files > 10);

  const auto manifest = read_manifest(root / "a");
  const std::string first = manifest["samples"][0]["pair_id"];
  const StoredPair sp = read_pair(root / "a" / manifest["samples"][0]["dir"].get<std::string>());
  CHECK(sp.pair_id == first);
  CHECK(sp.ref_mask.height() == kCanvas);
  fs::remove_all(root);
}
