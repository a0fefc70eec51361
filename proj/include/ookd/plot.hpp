#pragma once

#include <string>

#include "ookd/evalkit.hpp"

namespace ookd::plot {

// Renders two similarity histograms as overlaid bars (first in orange,
// second in blue) with axis ticks and mean markers, and writes a PNG.
void render_histogram_overlay(const evalkit::SimilarityHistogram& baseline,
                              const evalkit::SimilarityHistogram& distilled,
                              const std::string& png_path);

}  // namespace ookd::plot
