#include <doctest.h>

#include <cmath>

#include "ookd/augment.hpp"

using namespace ookd;
using namespace ookd::augment;
using data::Box;
using data::Mask;
using data::VideoClip;

TEST_SUITE_BEGIN("augment");

namespace {

// Hand-built clip: T frames of flat color with one rectangular instance.
VideoClip rect_clip(int T, int H, int W, int x0, int y0, int w, int h, int class_id,
                    std::array<uint8_t, 3> color = {200, 40, 40}) {
  VideoClip clip;
  clip.clip_id = "hand";
  clip.height = H;
  clip.width = W;
  data::InstanceTrack tr;
  tr.instance_id = 0;
  tr.class_id = class_id;
  for (int t = 0; t < T; ++t) {
    Image frame(H, W);
    for (auto& px : frame.pixels) px = 30;
    Mask m(H, W);
    for (int y = y0; y < y0 + h; ++y) {
      for (int x = x0; x < x0 + w; ++x) {
        m.at(y, x) = 1;
        for (int c = 0; c < 3; ++c) frame.at(y, x, c) = color[static_cast<size_t>(c)];
      }
    }
    clip.frames.push_back(std::move(frame));
    tr.masks.push_back(m);
    tr.boxes.push_back(data::box_from_mask(m));
    tr.visible.push_back(1);
  }
  clip.instances.push_back(std::move(tr));
  return clip;
}

void check_clip_invariants(const VideoClip& clip) {
  for (int t = 0; t < clip.num_frames(); ++t) {
    Mask seen(clip.height, clip.width);
    for (const auto& tr : clip.instances) {
      const Mask& m = tr.masks[static_cast<size_t>(t)];
      REQUIRE(m.height == clip.height);
      for (size_t p = 0; p < m.bits.size(); ++p) {
        CHECK_FALSE((seen.bits[p] && m.bits[p]));
        seen.bits[p] |= m.bits[p];
      }
      if (tr.visible[static_cast<size_t>(t)]) {
        Box expect = data::box_from_mask(m);
        for (int i = 0; i < 4; ++i) {
          CHECK(tr.boxes[static_cast<size_t>(t)][static_cast<size_t>(i)] ==
                doctest::Approx(expect[static_cast<size_t>(i)]));
        }
      } else {
        CHECK(m.empty());
        CHECK(tr.boxes[static_cast<size_t>(t)] == Box{0, 0, 0, 0});
      }
    }
  }
  std::vector<int> ids;
  for (const auto& tr : clip.instances) ids.push_back(tr.instance_id);
  std::sort(ids.begin(), ids.end());
  CHECK(std::adjacent_find(ids.begin(), ids.end()) == ids.end());
}

}  // namespace

TEST_CASE("paste probabilities match the paper endpoints") {
  // YTVIS-21 frequencies quoted for Human (most frequent) and Squirrel
  // (least frequent) with k = 0.7.
  std::vector<double> p{0.355, 0.2, 0.003};
  auto ps = paste_probabilities(p, 0.7);
  CHECK(ps[0] == 0.0);
  CHECK(ps[2] == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(ps[1] == doctest::Approx(0.7 * (0.355 - 0.2) / (0.355 - 0.003)).epsilon(1e-12));
}

TEST_CASE("paste probabilities hand case and degenerate input") {
  auto ps = paste_probabilities({0.5, 0.3, 0.2}, 0.7);
  CHECK(ps[0] == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(std::fabs(ps[1] - 0.7 * 0.2 / 0.3) < 1e-9);
  CHECK(std::fabs(ps[2] - 0.7) < 1e-9);

  auto flat = paste_probabilities({0.25, 0.25, 0.25, 0.25}, 0.7);
  for (double v : flat) CHECK(v == 0.0);

  CHECK_THROWS_AS(paste_probabilities({0.5, 0.5}, 1.5), ValidationError);
  CHECK_THROWS_AS(paste_probabilities({0.5, 0.5}, -0.1), ValidationError);
  CHECK_THROWS_AS(paste_probabilities({}, 0.7), ValidationError);
}

TEST_CASE("select_minor_sources filters by threshold") {
  data::ClipSpec spec;
  spec.num_frames = 3;
  spec.height = 48;
  spec.width = 48;
  spec.palette = data::default_palette();
  std::vector<VideoClip> clips;
  for (uint64_t s = 0; s < 30; ++s) clips.push_back(data::generate_clip(spec, s));
  int nc = static_cast<int>(spec.palette.size());
  auto dstats = data::compute_class_stats(clips, nc);

  SUBCASE("balanced two-class stats yield no candidates") {
    ClassStats st = make_class_stats({0.5, 0.5});
    CHECK(select_minor_sources(clips, st).empty());
  }

  SUBCASE("single minor class returns exactly its instances") {
    std::vector<double> p(static_cast<size_t>(nc), 0.95 / (nc - 1));
    p[2] = 0.05;
    ClassStats st = make_class_stats(p);
    auto got = select_minor_sources(clips, st);
    for (const auto& ref : got) {
      CHECK(clips[static_cast<size_t>(ref.clip_index)]
                .instances[static_cast<size_t>(ref.track_index)]
                .class_id == 2);
    }
    int expect = 0;
    for (const auto& c : clips) {
      for (const auto& tr : c.instances) expect += tr.class_id == 2 ? 1 : 0;
    }
    CHECK(static_cast<int>(got.size()) == expect);
  }

  SUBCASE("generated stats equal exhaustive filter oracle") {
    ClassStats st = make_class_stats(dstats.p);
    auto got = select_minor_sources(clips, st);
    std::vector<SourceRef> expect;
    for (size_t ci = 0; ci < clips.size(); ++ci) {
      for (size_t ti = 0; ti < clips[ci].instances.size(); ++ti) {
        if (st.p[static_cast<size_t>(clips[ci].instances[ti].class_id)] < 0.10) {
          expect.push_back({static_cast<int>(ci), static_cast<int>(ti)});
        }
      }
    }
    REQUIRE(got.size() == expect.size());
    for (size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].clip_index == expect[i].clip_index);
      CHECK(got[i].track_index == expect[i].track_index);
    }
  }
}

TEST_CASE("zero paste probability leaves the target bit-equal") {
  VideoClip target = rect_clip(3, 48, 48, 4, 4, 10, 8, 0);
  VideoClip source = rect_clip(3, 48, 48, 20, 20, 12, 12, 5);
  RngStream rng(3);
  PasteOutcome out;
  VideoClip got = minor_paste(target, source, 0, 0.0, rng, &out);
  CHECK_FALSE(out.pasted);
  CHECK(got == target);
}

TEST_CASE("non-overlapping paste keeps target masks and appends a track") {
  VideoClip target = rect_clip(3, 48, 48, 2, 2, 10, 8, 0);
  VideoClip source = rect_clip(3, 48, 48, 30, 30, 10, 10, 5, {40, 200, 40});
  PasteOutcome out;
  VideoClip got = paste_at(target, source, 0, 0, 0, &out);
  CHECK(out.pasted);
  REQUIRE(got.instances.size() == 2);
  CHECK(got.instances[0].masks == target.instances[0].masks);
  CHECK(got.instances[0].boxes == target.instances[0].boxes);
  CHECK(got.instances[1].class_id == 5);
  CHECK(got.instances[1].instance_id == 1);
  CHECK(got.instances[1].masks[0].area() == 100);
  // Pasted pixels overwrite the target image.
  CHECK(got.frames[0].at(35, 35, 1) == 200);
  check_clip_invariants(got);
}

TEST_CASE("paste fully covering a small instance empties its mask and box") {
  VideoClip target = rect_clip(3, 48, 48, 20, 20, 6, 6, 0);
  VideoClip source = rect_clip(3, 48, 48, 16, 16, 20, 20, 5);
  PasteOutcome out;
  VideoClip got = paste_at(target, source, 0, 0, 0, &out);
  CHECK(out.pasted);
  CHECK(got.instances[0].masks[2].empty());
  CHECK(got.instances[0].visible[2] == 0);
  CHECK(got.instances[0].boxes[2] == Box{0, 0, 0, 0});
  check_clip_invariants(got);
}

TEST_CASE("paste clipped below 16 visible pixels everywhere aborts") {
  VideoClip target = rect_clip(2, 48, 48, 2, 2, 6, 6, 0);
  VideoClip source = rect_clip(2, 48, 48, 20, 20, 10, 10, 5);
  PasteOutcome out;
  VideoClip got = paste_at(target, source, 0, 45 - 20, 45 - 20, &out);
  CHECK(out.aborted_small);
  CHECK(got == target);
}

TEST_CASE("empty source mask is skipped with a flag") {
  VideoClip target = rect_clip(2, 48, 48, 2, 2, 6, 6, 0);
  VideoClip source = rect_clip(2, 48, 48, 20, 20, 10, 10, 5);
  for (auto& m : source.instances[0].masks) m = Mask(48, 48);
  RngStream rng(4);
  PasteOutcome out;
  VideoClip got = minor_paste(target, source, 0, 1.0, rng, &out);
  CHECK(out.skipped_empty);
  CHECK(got == target);
}

TEST_CASE("shorter source clamps to last frame; longer source truncates") {
  VideoClip target = rect_clip(4, 48, 48, 2, 2, 6, 6, 0);
  VideoClip source = rect_clip(2, 48, 48, 20, 20, 10, 10, 5);
  VideoClip got = paste_at(target, source, 0, 0, 0);
  REQUIRE(got.instances.size() == 2);
  for (int t = 0; t < 4; ++t) CHECK(got.instances[1].masks[static_cast<size_t>(t)].area() == 100);

  VideoClip longer = rect_clip(6, 48, 48, 20, 20, 10, 10, 5);
  VideoClip got2 = paste_at(target, longer, 0, 0, 0);
  CHECK(got2.instances[1].masks.size() == 4);
  check_clip_invariants(got2);
}

TEST_CASE("random pastes preserve all clip invariants") {
  data::ClipSpec spec;
  spec.num_frames = 4;
  spec.height = 48;
  spec.width = 48;
  spec.palette = data::default_palette();
  spec.min_instances = 2;
  spec.max_instances = 3;
  RngStream rng(99);
  for (uint64_t s = 0; s < 12; ++s) {
    VideoClip target = data::generate_clip(spec, s);
    VideoClip source = data::generate_clip(spec, s + 100);
    int track = static_cast<int>(rng.randint(static_cast<int64_t>(source.instances.size())));
    VideoClip got = minor_paste(target, source, track, 0.9, rng);
    check_clip_invariants(got);
  }
}

TEST_CASE("empirical paste rate tracks p_s within 0.02") {
  VideoClip target = rect_clip(2, 32, 32, 2, 2, 6, 6, 0);
  VideoClip source = rect_clip(2, 32, 32, 10, 10, 10, 10, 1);
  for (double p : {0.7, 0.35}) {
    RngStream rng(static_cast<uint64_t>(p * 1000));
    int pasted = 0;
    const int trials = 10000;
    for (int i = 0; i < trials; ++i) {
      PasteOutcome out;
      minor_paste(target, source, 0, p, rng, &out);
      pasted += (out.pasted || out.aborted_small) ? 1 : 0;
    }
    CHECK(std::fabs(static_cast<double>(pasted) / trials - p) < 0.02);
  }
}

TEST_SUITE_END();
