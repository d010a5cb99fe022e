// SPDX-License-Identifier: Apache-2.0
#include "hydra/curation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "hydra/errors.hpp"

namespace fs = std::filesystem;

namespace hydra {

namespace {

double luminance(const Frame& f, std::size_t pixel) {
    const std::size_t base = pixel * 3;
    return 0.299 * f.rgb[base] + 0.587 * f.rgb[base + 1] + 0.114 * f.rgb[base + 2];
}

void require_uniform(const std::vector<Frame>& frames) {
    for (const Frame& f : frames) {
        if (f.width < 1 || f.height < 1 ||
            f.rgb.size() != static_cast<std::size_t>(f.width) * f.height * 3) {
            throw ShapeError("frame has inconsistent pixel buffer");
        }
        if (f.width != frames.front().width || f.height != frames.front().height) {
            throw ShapeError("frames differ in dimensions within one clip");
        }
    }
}

std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::map<std::string, Scorer>& scorer_registry() {
    static std::map<std::string, Scorer> reg = {
        {"optical", Scorer{"optical", 2, optical_score}},
        {"aesthetic", Scorer{"aesthetic", 1, aesthetic_score}},
    };
    return reg;
}

}  // namespace

std::vector<std::pair<int, int>> segment(const FrameSequence& seq, double min_s, double max_s) {
    if (seq.fps <= 0.0) throw ParameterError("segment: fps must be positive");
    if (seq.frames.empty()) throw ParameterError("segment: empty frame sequence");
    if (min_s <= 0.0 || max_s < min_s) {
        throw ParameterError("segment: need 0 < min_s <= max_s");
    }
    const int n = static_cast<int>(seq.frames.size());
    const int clip_frames = static_cast<int>(std::floor(max_s * seq.fps));
    // Degenerate frame rates where even a full-length chunk cannot reach
    // min_s yield nothing rather than out-of-range clips.
    if (clip_frames < 1 || clip_frames / seq.fps < min_s) return {};

    std::vector<std::pair<int, int>> clips;
    int pos = 0;
    while (n - pos >= clip_frames) {
        clips.emplace_back(pos, pos + clip_frames);
        pos += clip_frames;
    }
    const int tail = n - pos;
    if (tail > 0 && tail / seq.fps >= min_s) clips.emplace_back(pos, n);
    return clips;
}

double optical_score(const std::vector<Frame>& frames) {
    if (frames.size() < 2) throw ParameterError("optical_score: need at least 2 frames");
    require_uniform(frames);
    const std::size_t pixels = static_cast<std::size_t>(frames.front().width) * frames.front().height;
    double pair_sum = 0.0;
    for (std::size_t i = 0; i + 1 < frames.size(); ++i) {
        double acc = 0.0;
        for (std::size_t p = 0; p < pixels; ++p) {
            acc += std::fabs(luminance(frames[i + 1], p) - luminance(frames[i], p));
        }
        pair_sum += acc / static_cast<double>(pixels);
    }
    const double mean_diff = pair_sum / static_cast<double>(frames.size() - 1);
    return (mean_diff * 100.0) / 255.0;
}

double aesthetic_score(const std::vector<Frame>& frames) {
    if (frames.empty()) throw ParameterError("aesthetic_score: need at least 1 frame");
    require_uniform(frames);
    const std::size_t pixels = static_cast<std::size_t>(frames.front().width) * frames.front().height;
    // Largest attainable spreads: half-black/half-white luminance, and a
    // single channel at full scale against two at zero.
    const double max_lum_std = 127.5;
    const double max_chan_std = 255.0 * std::sqrt(2.0) / 3.0;

    double total = 0.0;
    for (const Frame& f : frames) {
        double lum_sum = 0.0;
        for (std::size_t p = 0; p < pixels; ++p) lum_sum += luminance(f, p);
        const double lum_mean = lum_sum / static_cast<double>(pixels);
        double lum_var = 0.0;
        double chan_std_sum = 0.0;
        for (std::size_t p = 0; p < pixels; ++p) {
            const double d = luminance(f, p) - lum_mean;
            lum_var += d * d;
            const double r = f.rgb[p * 3];
            const double g = f.rgb[p * 3 + 1];
            const double b = f.rgb[p * 3 + 2];
            const double m = (r + g + b) / 3.0;
            chan_std_sum += std::sqrt(((r - m) * (r - m) + (g - m) * (g - m) + (b - m) * (b - m)) / 3.0);
        }
        const double contrast = std::sqrt(lum_var / static_cast<double>(pixels)) / max_lum_std;
        const double colorfulness = (chan_std_sum / static_cast<double>(pixels)) / max_chan_std;
        total += 50.0 * contrast + 50.0 * colorfulness;
    }
    return total / static_cast<double>(frames.size());
}

const Scorer& find_scorer(const std::string& name) {
    const auto& reg = scorer_registry();
    const auto it = reg.find(name);
    if (it == reg.end()) {
        std::string known;
        for (const auto& [k, v] : reg) known += (known.empty() ? "" : ", ") + k;
        throw ConfigError("unknown scorer \"" + name + "\" (registered: " + known + ")");
    }
    return it->second;
}

void register_scorer(Scorer scorer) {
    if (scorer.name.empty() || !scorer.fn) throw ParameterError("scorer needs a name and a function");
    scorer_registry()[scorer.name] = std::move(scorer);
}

Selection select(double s_opt, double s_aes, double alpha, double theta) {
    const double s = alpha * s_opt + (1.0 - alpha) * s_aes;
    return {s, s >= theta};
}

double quantize6(double v) {
    return std::strtod(fmt6(v).c_str(), nullptr);
}

ClipRecord make_clip_record(const std::string& clip_id, const std::string& source_id,
                            int start_frame, int end_frame, double duration_s, double s_opt,
                            double s_aes, double alpha, double theta) {
    ClipRecord r;
    r.clip_id = clip_id;
    r.source_id = source_id;
    r.start_frame = start_frame;
    r.end_frame = end_frame;
    r.duration_s = quantize6(duration_s);
    r.s_optical = quantize6(s_opt);
    r.s_aesthetic = quantize6(s_aes);
    // Both the combined score and the verdict refer to the quantized values,
    // so a parsed manifest reproduces this exact decision.
    const Selection sel = select(r.s_optical, r.s_aesthetic, alpha, theta);
    r.s = quantize6(sel.s);
    r.selected = r.s >= theta;
    return r;
}

int build_manifest(const std::vector<ClipRecord>& records, const std::string& path) {
    std::string bad;
    for (const ClipRecord& r : records) {
        const bool finite = std::isfinite(r.duration_s) && std::isfinite(r.s_optical) &&
                            std::isfinite(r.s_aesthetic) && std::isfinite(r.s);
        if (!finite || r.duration_s < 3.0 || r.duration_s > 5.0) {
            bad += (bad.empty() ? "" : ", ") + r.clip_id;
        }
    }
    if (!bad.empty()) throw ValidationError("records violate duration/finiteness bounds: " + bad);

    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest: " + path);
    for (const ClipRecord& r : records) {
        const std::string caption =
            r.caption ? nlohmann::json(*r.caption).dump() : std::string("null");
        out << "{\"caption\":" << caption << ",\"clip_id\":" << nlohmann::json(r.clip_id).dump()
            << ",\"duration_s\":" << fmt6(r.duration_s) << ",\"end_frame\":" << r.end_frame
            << ",\"s\":" << fmt6(r.s) << ",\"s_aesthetic\":" << fmt6(r.s_aesthetic)
            << ",\"s_optical\":" << fmt6(r.s_optical)
            << ",\"selected\":" << (r.selected ? "true" : "false")
            << ",\"source_id\":" << nlohmann::json(r.source_id).dump()
            << ",\"start_frame\":" << r.start_frame << "}\n";
    }
    if (!out) throw IoError("failed while writing manifest: " + path);
    return static_cast<int>(records.size());
}

std::vector<ClipRecord> parse_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest: " + path);
    std::vector<ClipRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const nlohmann::json j = nlohmann::json::parse(line);
            ClipRecord r;
            r.clip_id = j.at("clip_id").get<std::string>();
            r.source_id = j.at("source_id").get<std::string>();
            r.start_frame = j.at("start_frame").get<int>();
            r.end_frame = j.at("end_frame").get<int>();
            r.duration_s = j.at("duration_s").get<double>();
            r.s_optical = j.at("s_optical").get<double>();
            r.s_aesthetic = j.at("s_aesthetic").get<double>();
            r.s = j.at("s").get<double>();
            r.selected = j.at("selected").get<bool>();
            if (!j.at("caption").is_null()) r.caption = j.at("caption").get<std::string>();
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw IoError("manifest line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

Frame read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image: " + path);

    // Header tokens may be separated by arbitrary whitespace and # comments.
    auto next_token = [&]() -> std::string {
        std::string tok;
        int c;
        while ((c = in.get()) != EOF) {
            if (c == '#') {
                while ((c = in.get()) != EOF && c != '\n') {
                }
                continue;
            }
            if (std::isspace(c)) {
                if (!tok.empty()) return tok;
                continue;
            }
            tok.push_back(static_cast<char>(c));
        }
        return tok;
    };

    if (next_token() != "P6") throw IoError("not a binary PPM (P6): " + path);
    auto parse_dim = [&](const std::string& tok, const char* what) {
        char* end = nullptr;
        const long v = std::strtol(tok.c_str(), &end, 10);
        if (tok.empty() || end != tok.c_str() + tok.size() || v < 1) {
            throw IoError(std::string("bad PPM ") + what + " in " + path);
        }
        return static_cast<int>(v);
    };
    const int w = parse_dim(next_token(), "width");
    const int h = parse_dim(next_token(), "height");
    const int maxval = parse_dim(next_token(), "maxval");
    if (maxval != 255) throw IoError("unsupported PPM maxval (want 255): " + path);

    Frame f(w, h);
    in.read(reinterpret_cast<char*>(f.rgb.data()), static_cast<std::streamsize>(f.rgb.size()));
    if (in.gcount() != static_cast<std::streamsize>(f.rgb.size())) {
        throw IoError("truncated PPM pixel data: " + path);
    }
    return f;
}

void write_ppm(const Frame& frame, const std::string& path) {
    if (frame.width < 1 || frame.height < 1 ||
        frame.rgb.size() != static_cast<std::size_t>(frame.width) * frame.height * 3) {
        throw ParameterError("write_ppm: malformed frame");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write image: " + path);
    out << "P6\n" << frame.width << " " << frame.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(frame.rgb.data()),
              static_cast<std::streamsize>(frame.rgb.size()));
    if (!out) throw IoError("failed while writing image: " + path);
}

FrameSequence load_frame_dir(const std::string& dir) {
    const fs::path root(dir);
    std::ifstream meta(root / "meta");
    if (!meta) throw IoError("missing meta file in " + dir);
    FrameSequence seq;
    std::string line;
    bool have_fps = false;
    while (std::getline(meta, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        if (line.substr(0, eq) == "fps") {
            const std::string v = line.substr(eq + 1);
            char* end = nullptr;
            seq.fps = std::strtod(v.c_str(), &end);
            if (v.empty() || end != v.c_str() + v.size() || seq.fps <= 0.0) {
                throw IoError("meta in " + dir + " has invalid fps \"" + v + "\"");
            }
            have_fps = true;
        }
    }
    if (!have_fps) throw IoError("meta in " + dir + " lacks an fps entry");

    for (int i = 0;; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%06d.ppm", i);
        const fs::path p = root / name;
        if (!fs::exists(p)) break;
        seq.frames.push_back(read_ppm(p.string()));
        if (seq.frames.back().width != seq.frames.front().width ||
            seq.frames.back().height != seq.frames.front().height) {
            throw IoError("frame dimensions change within " + dir);
        }
    }
    if (seq.frames.empty()) throw IoError("no frames found in " + dir);
    return seq;
}

void save_frame_dir(const FrameSequence& seq, const std::string& dir) {
    if (seq.fps <= 0.0) throw ParameterError("save_frame_dir: fps must be positive");
    const fs::path root(dir);
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IoError("cannot create frame directory " + dir + ": " + ec.message());
    for (std::size_t i = 0; i < seq.frames.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%06zu.ppm", i);
        write_ppm(seq.frames[i], (root / name).string());
    }
    std::ofstream meta(root / "meta");
    if (!meta) throw IoError("cannot write meta file in " + dir);
    meta << "fps=" << fmt6(seq.fps) << "\n";
}

CurationSummary curate_directory(const std::string& input_dir, const CurationOptions& opts) {
    const Scorer& optical = find_scorer(opts.optical_scorer);
    const Scorer& aesthetic = find_scorer(opts.aesthetic_scorer);

    if (!fs::is_directory(input_dir)) throw IoError("input is not a directory: " + input_dir);
    std::vector<std::string> sources;
    for (const auto& entry : fs::directory_iterator(input_dir)) {
        if (entry.is_directory()) sources.push_back(entry.path().filename().string());
    }
    std::sort(sources.begin(), sources.end());
    if (sources.empty()) throw IoError("no sources found in " + input_dir);

    struct ClipTask {
        std::string source_id;
        int start, end;
        double duration;
        std::vector<Frame> frames;
        double s_opt = 0.0, s_aes = 0.0;
        std::string error;
    };
    std::vector<ClipTask> tasks;
    CurationSummary summary;
    for (const std::string& source : sources) {
        const FrameSequence seq = load_frame_dir((fs::path(input_dir) / source).string());
        for (const auto& [start, end] : segment(seq, opts.min_s, opts.max_s)) {
            ClipTask task;
            task.source_id = source;
            task.start = start;
            task.end = end;
            task.duration = (end - start) / seq.fps;
            task.frames.assign(seq.frames.begin() + start, seq.frames.begin() + end);
            tasks.push_back(std::move(task));
        }
    }
    summary.sources = static_cast<int>(sources.size());
    summary.clips = static_cast<int>(tasks.size());

    // Scoring is independent per clip; slots are written in place so the
    // emitted order never depends on completion order.
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        ClipTask& task = tasks[i];
        try {
            if (static_cast<int>(task.frames.size()) < optical.min_frames ||
                static_cast<int>(task.frames.size()) < aesthetic.min_frames) {
                throw ValidationError("clip has too few frames for the configured scorers");
            }
            task.s_opt = optical.fn(task.frames);
            task.s_aes = aesthetic.fn(task.frames);
        } catch (const std::exception& e) {
            task.error = e.what();
        }
    }

    std::map<std::string, int> per_source_index;
    for (const ClipTask& task : tasks) {
        const int idx = per_source_index[task.source_id]++;
        char suffix[16];
        std::snprintf(suffix, sizeof(suffix), "#%03d", idx);
        const std::string clip_id = task.source_id + suffix;
        if (!task.error.empty()) {
            throw ValidationError("scoring failed for clip " + clip_id + ": " + task.error);
        }
        ClipRecord r = make_clip_record(clip_id, task.source_id, task.start, task.end,
                                        task.duration, task.s_opt, task.s_aes, opts.alpha,
                                        opts.theta);
        if (r.selected) ++summary.selected;
        summary.records.push_back(std::move(r));
    }
    return summary;
}

}  // namespace hydra
