// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace hydra {

/// One 8-bit RGB image, row-major, 3 bytes per pixel.
struct Frame {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;

    Frame() = default;
    Frame(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}
    std::uint8_t& at(int x, int y, int c) {
        return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
    }
    std::uint8_t at(int x, int y, int c) const {
        return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
    }
    bool operator==(const Frame&) const = default;
};

struct FrameSequence {
    std::vector<Frame> frames;
    double fps = 0.0;
};

struct ClipRecord {
    std::string clip_id;
    std::string source_id;
    int start_frame = 0;
    int end_frame = 0;  // exclusive
    double duration_s = 0.0;
    double s_optical = 0.0;
    double s_aesthetic = 0.0;
    double s = 0.0;
    bool selected = false;
    std::optional<std::string> caption;

    bool operator==(const ClipRecord&) const = default;
};

/// Greedy partition into consecutive max_s-second clips; a trailing remainder
/// is kept iff it spans at least min_s seconds. Returns (start, end) frame
/// index pairs, end exclusive.
std::vector<std::pair<int, int>> segment(const FrameSequence& seq, double min_s = 3.0,
                                         double max_s = 5.0);

/// Motion proxy on [0, 100]: mean over consecutive frame pairs of the mean
/// absolute per-pixel luminance difference, rescaled from [0, 255].
double optical_score(const std::vector<Frame>& frames);

/// Appeal proxy on [0, 100]: per frame, 50 * normalized luminance contrast
/// plus 50 * normalized colorfulness (per-pixel channel spread), averaged.
double aesthetic_score(const std::vector<Frame>& frames);

/// Named scorer entry so alternative implementations can be plugged in.
struct Scorer {
    std::string name;
    int min_frames = 1;
    std::function<double(const std::vector<Frame>&)> fn;
};

/// Looks up a registered scorer ("optical" and "aesthetic" are built in).
/// Unknown names are a configuration error.
const Scorer& find_scorer(const std::string& name);
void register_scorer(Scorer scorer);

struct Selection {
    double s = 0.0;
    bool selected = false;
};

/// Weighted score S = alpha * s_opt + (1 - alpha) * s_aes; a clip is kept
/// iff S >= theta (boundary inclusive).
Selection select(double s_opt, double s_aes, double alpha = 0.7, double theta = 10.0);

/// Rounds to exactly six decimal places (the manifest's serialized
/// precision) so stored scores recompute bit-for-bit after a round trip.
double quantize6(double v);

/// Builds a fully populated record: component scores are quantized to the
/// manifest precision before the combined score is computed.
ClipRecord make_clip_record(const std::string& clip_id, const std::string& source_id,
                            int start_frame, int end_frame, double duration_s, double s_opt,
                            double s_aes, double alpha = 0.7, double theta = 10.0);

/// Writes one JSON object per record (floats at six decimals) and returns
/// the number written. Records violating the duration bounds raise a
/// validation error listing the offending clip ids.
int build_manifest(const std::vector<ClipRecord>& records, const std::string& path);
std::vector<ClipRecord> parse_manifest(const std::string& path);

// Binary PPM (P6, maxval 255) I/O and the frame-directory layout:
// <source>/frame_%06d.ppm numbered from zero plus <source>/meta with
// a single `fps=<float>` entry.
Frame read_ppm(const std::string& path);
void write_ppm(const Frame& frame, const std::string& path);
FrameSequence load_frame_dir(const std::string& dir);
void save_frame_dir(const FrameSequence& seq, const std::string& dir);

struct CurationOptions {
    double alpha = 0.7;
    double theta = 10.0;
    double min_s = 3.0;
    double max_s = 5.0;
    std::string optical_scorer = "optical";
    std::string aesthetic_scorer = "aesthetic";
};

struct CurationSummary {
    int sources = 0;
    int clips = 0;
    int selected = 0;
    std::vector<ClipRecord> records;
};

/// Full pipeline over every source directory under input_dir (sorted by
/// name): segment, score each clip, apply the selection rule. Clip scoring
/// is parallel; records come back in clip-id order.
CurationSummary curate_directory(const std::string& input_dir, const CurationOptions& opts);

}  // namespace hydra
