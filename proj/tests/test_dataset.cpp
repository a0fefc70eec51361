#include <doctest.h>
#include <json.hpp>

#include <filesystem>
#include <fstream>

#include "ookd/dataset.hpp"

using namespace ookd;
using namespace ookd::data;
namespace fs = std::filesystem;

TEST_SUITE_BEGIN("dataset");

namespace {

ClipSpec small_spec() {
  ClipSpec spec;
  spec.num_frames = 4;
  spec.height = 48;
  spec.width = 48;
  spec.palette = default_palette();
  spec.min_instances = 2;
  spec.max_instances = 3;
  return spec;
}

}  // namespace

TEST_CASE("rle round trip and counts-first convention") {
  Mask m(3, 4);
  m.at(0, 1) = 1;
  m.at(0, 2) = 1;
  m.at(2, 3) = 1;
  auto counts = rle_encode(m);
  CHECK(counts == std::vector<int>{1, 2, 8, 1});
  CHECK(rle_decode(3, 4, counts) == m);

  Mask all1(2, 2);
  std::fill(all1.bits.begin(), all1.bits.end(), uint8_t{1});
  CHECK(rle_encode(all1) == std::vector<int>{0, 4});
  CHECK(rle_decode(2, 2, {0, 4}) == all1);
  CHECK_THROWS_AS(rle_decode(2, 2, {0, 5}), IoError);
  CHECK_THROWS_AS(rle_decode(2, 2, {0, 3}), IoError);
}

TEST_CASE("box_from_mask is exact on pixel extents") {
  Mask m(10, 20);
  m.at(2, 5) = 1;
  m.at(4, 9) = 1;
  Box b = box_from_mask(m);
  CHECK(b[0] == doctest::Approx((5.0 + 10.0) / 2 / 20.0));
  CHECK(b[1] == doctest::Approx((2.0 + 5.0) / 2 / 10.0));
  CHECK(b[2] == doctest::Approx(5.0 / 20.0));
  CHECK(b[3] == doctest::Approx(3.0 / 10.0));
}

TEST_CASE("generate_clip is deterministic for (spec, seed)") {
  ClipSpec spec = small_spec();
  VideoClip a = generate_clip(spec, 7);
  VideoClip b = generate_clip(spec, 7);
  CHECK(a == b);
  VideoClip c = generate_clip(spec, 8);
  CHECK_FALSE(a == c);
}

TEST_CASE("instance count range is honored") {
  ClipSpec spec = small_spec();
  spec.min_instances = 3;
  spec.max_instances = 3;
  for (uint64_t s = 0; s < 5; ++s) {
    CHECK(generate_clip(spec, s).instances.size() == 3);
  }
}

TEST_CASE("invalid specs raise errors naming the field") {
  ClipSpec spec = small_spec();
  spec.num_frames = 1;
  CHECK_THROWS_WITH_AS(generate_clip(spec, 1), doctest::Contains("num_frames"),
                       ValidationError);
  spec = small_spec();
  spec.height = 16;
  CHECK_THROWS_WITH_AS(generate_clip(spec, 1), doctest::Contains("height"), ValidationError);
  spec = small_spec();
  spec.palette[0].weight += 0.1;
  CHECK_THROWS_WITH_AS(generate_clip(spec, 1), doctest::Contains("weights"), ValidationError);
  spec = small_spec();
  spec.min_instances = 0;
  CHECK_THROWS_WITH_AS(generate_clip(spec, 1), doctest::Contains("min_instances"),
                       ValidationError);
}

TEST_CASE("per-frame masks are disjoint and union equals annotated pixels") {
  ClipSpec spec = small_spec();
  spec.min_instances = 3;
  spec.max_instances = 4;
  spec.motion.max_translation = 3.0;
  for (uint64_t seed = 0; seed < 8; ++seed) {
    VideoClip clip = generate_clip(spec, seed);
    for (int t = 0; t < clip.num_frames(); ++t) {
      Mask unionm(clip.height, clip.width);
      int64_t sum_areas = 0;
      for (const InstanceTrack& tr : clip.instances) {
        const Mask& m = tr.masks[static_cast<size_t>(t)];
        sum_areas += m.area();
        for (size_t p = 0; p < m.bits.size(); ++p) {
          CHECK_FALSE((unionm.bits[p] && m.bits[p]));  // disjoint
          unionm.bits[p] |= m.bits[p];
        }
      }
      CHECK(unionm.area() == sum_areas);
    }
  }
}

TEST_CASE("boxes recompute exactly from masks on visible frames") {
  VideoClip clip = generate_clip(small_spec(), 21);
  for (const InstanceTrack& tr : clip.instances) {
    for (int t = 0; t < clip.num_frames(); ++t) {
      if (tr.visible[static_cast<size_t>(t)]) {
        Box expect = box_from_mask(tr.masks[static_cast<size_t>(t)]);
        for (int k = 0; k < 4; ++k) {
          CHECK(tr.boxes[static_cast<size_t>(t)][static_cast<size_t>(k)] ==
                doctest::Approx(expect[static_cast<size_t>(k)]).epsilon(1e-12));
        }
      } else {
        CHECK(tr.boxes[static_cast<size_t>(t)] == Box{0, 0, 0, 0});
        CHECK(tr.masks[static_cast<size_t>(t)].empty());
      }
    }
  }
}

TEST_CASE("class stats: forced ratios and recount oracle") {
  ClipSpec spec = small_spec();
  VideoClip c1 = generate_clip(spec, 1);
  VideoClip c2 = generate_clip(spec, 2);

  // Forced ratio {A:3, B:1}.
  VideoClip fake = c1;
  fake.instances.resize(4);
  for (int i = 0; i < 4; ++i) fake.instances[static_cast<size_t>(i)].class_id = i < 3 ? 0 : 1;
  DatasetStats st = compute_class_stats({fake}, 2);
  CHECK(st.p[0] == doctest::Approx(0.75));
  CHECK(st.p[1] == doctest::Approx(0.25));

  // Single class.
  for (auto& tr : fake.instances) tr.class_id = 0;
  st = compute_class_stats({fake}, 1);
  CHECK(st.p[0] == doctest::Approx(1.0));

  CHECK_THROWS_AS(compute_class_stats({}, 3), ValidationError);

  // Recount oracle over a generated set.
  std::vector<VideoClip> ds;
  for (uint64_t s = 0; s < 50; ++s) ds.push_back(generate_clip(spec, s));
  int nc = static_cast<int>(spec.palette.size());
  st = compute_class_stats(ds, nc);
  std::vector<int64_t> recount(static_cast<size_t>(nc), 0);
  int64_t total = 0;
  for (const auto& clip : ds) {
    for (const auto& tr : clip.instances) {
      ++recount[static_cast<size_t>(tr.class_id)];
      ++total;
    }
  }
  double psum = 0.0;
  for (int c = 0; c < nc; ++c) {
    CHECK(st.counts[static_cast<size_t>(c)] == recount[static_cast<size_t>(c)]);
    CHECK(st.p[static_cast<size_t>(c)] ==
          doctest::Approx(static_cast<double>(recount[static_cast<size_t>(c)]) /
                          static_cast<double>(total)));
    psum += st.p[static_cast<size_t>(c)];
  }
  CHECK(psum == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("class frequencies converge to palette weights (chi-squared)") {
  ClipSpec spec = small_spec();
  spec.num_frames = 2;
  spec.height = 32;
  spec.width = 32;
  spec.min_instances = 3;
  spec.max_instances = 3;
  std::vector<VideoClip> ds;
  for (uint64_t s = 0; s < 700; ++s) ds.push_back(generate_clip(spec, s));
  int nc = static_cast<int>(spec.palette.size());
  DatasetStats st = compute_class_stats(ds, nc);
  int64_t total = 0;
  for (int64_t c : st.counts) total += c;
  CHECK(total >= 2000);
  double chi2 = 0.0;
  for (int c = 0; c < nc; ++c) {
    double expect = spec.palette[static_cast<size_t>(c)].weight * static_cast<double>(total);
    double diff = static_cast<double>(st.counts[static_cast<size_t>(c)]) - expect;
    chi2 += diff * diff / expect;
  }
  // df = 6, p = 0.01 critical value.
  CHECK(chi2 < 16.812);
}

TEST_CASE("dataset save/load round trip is exact") {
  fs::path root = fs::temp_directory_path() / "ookd_test_roundtrip";
  fs::remove_all(root);
  Dataset ds;
  ds.classes = default_palette();
  ClipSpec spec = small_spec();
  for (uint64_t s = 0; s < 3; ++s) {
    char id[32];
    std::snprintf(id, sizeof(id), "clip_%05d", static_cast<int>(s));
    ds.clips.push_back(generate_clip(spec, s, id));
  }
  save_dataset(ds, root.string());
  std::vector<std::string> warnings;
  Dataset back = load_dataset(root.string(), &warnings);
  CHECK(warnings.empty());
  REQUIRE(back.clips.size() == ds.clips.size());
  for (size_t i = 0; i < ds.clips.size(); ++i) CHECK(back.clips[i] == ds.clips[i]);
  CHECK(back.classes.size() == ds.classes.size());
  fs::remove_all(root);
}

TEST_CASE("load errors name the offending clip and frame") {
  fs::path root = fs::temp_directory_path() / "ookd_test_loaderr";
  fs::remove_all(root);
  Dataset ds;
  ds.classes = default_palette();
  ds.clips.push_back(generate_clip(small_spec(), 5, "clip_bad"));
  save_dataset(ds, root.string());

  // Drop one mask entry from the annotation.
  fs::path ann = root / "annotations" / "clip_bad.json";
  nlohmann::json j;
  {
    std::ifstream in(ann);
    in >> j;
  }
  j["instances"][0]["masks"].erase(j["instances"][0]["masks"].size() - 1);
  {
    std::ofstream out(ann);
    out << j.dump();
  }

  CHECK_THROWS_WITH_AS(load_dataset(root.string()), doctest::Contains("clip_bad"), IoError);
  fs::remove_all(root);
}

TEST_CASE("box inconsistent with mask produces a warning naming the instance") {
  fs::path root = fs::temp_directory_path() / "ookd_test_boxwarn";
  fs::remove_all(root);
  Dataset ds;
  ds.classes = default_palette();
  VideoClip clip = generate_clip(small_spec(), 6, "clip_warn");
  // Corrupt one visible box by several pixels.
  for (auto& tr : clip.instances) {
    if (tr.visible[0]) {
      tr.boxes[0][0] += 5.0 / clip.width;
      break;
    }
  }
  ds.clips.push_back(clip);
  save_dataset(ds, root.string());
  std::vector<std::string> warnings;
  load_dataset(root.string(), &warnings);
  REQUIRE(!warnings.empty());
  CHECK(warnings[0].find("clip_warn") != std::string::npos);
  fs::remove_all(root);
}

TEST_SUITE_END();
