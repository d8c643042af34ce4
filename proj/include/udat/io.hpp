#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "udat/core_types.hpp"
#include "udat/raster.hpp"

namespace udat {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

inline Image load_image(const fs::path& path) {
    const cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw FormatError("cannot decode image '" + path.string() + "'");
    Image img(bgr.cols, bgr.rows, 3);
    for (int y = 0; y < bgr.rows; ++y) {
        const auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < bgr.cols; ++x)
            for (int c = 0; c < 3; ++c) img.at(x, y, c) = row[x][2 - c];
    }
    return img;
}

/// Writes 8-bit PNG/JPEG (by extension); values are rounded and clamped.
inline void save_image(const fs::path& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3) throw DataError("save_image: unsupported channel count");
    cv::Mat out(img.height, img.width, img.channels == 1 ? CV_8UC1 : CV_8UC3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            auto px = [&](int c) { return cv::saturate_cast<uchar>(std::lround(img.at(x, y, c))); };
            if (img.channels == 1)
                out.at<uchar>(y, x) = px(0);
            else
                out.at<cv::Vec3b>(y, x) = {px(2), px(1), px(0)};
        }
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), out)) throw DataError("cannot write image '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

enum class Split { train_unlabeled, test_labeled };

/// Directory per sequence; frames in `<seq>/<image_dir>/` (or directly in
/// `<seq>/` when that subdirectory is absent), ground truth and attribute tags
/// as plain text files beside them.
struct DatasetLayout {
    fs::path root;
    Split split = Split::test_labeled;
    std::string image_dir = "img";
    std::string ground_truth_file = "groundtruth_rect.txt";
    std::string attribute_file = "attributes.txt";
};

inline bool is_image_file(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".pgm" || ext == ".ppm";
}

/// Sequence directory names in lexicographic order.
inline std::vector<std::string> list_sequences(const DatasetLayout& layout) {
    if (!fs::is_directory(layout.root)) throw NotFoundError("dataset root '" + layout.root.string() + "' not found");
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(layout.root))
        if (e.is_directory()) names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    return names;
}

/// One `x,y,w,h` box per non-empty line; commas, tabs or spaces separate.
inline std::vector<BoundingBox> parse_ground_truth(std::istream& in, const std::string& source) {
    std::vector<BoundingBox> boxes;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::replace(line.begin(), line.end(), '\t', ' ');
        std::istringstream ss(line);
        BoundingBox b;
        std::string extra;
        if (!(ss >> b.x >> b.y >> b.w >> b.h) || (ss >> extra))
            throw FormatError(source + ":" + std::to_string(lineno) + ": expected x,y,w,h");
        boxes.push_back(b);
    }
    return boxes;
}

inline std::set<std::string> parse_attributes(std::istream& in) {
    std::set<std::string> tags;
    std::string line;
    while (std::getline(in, line)) {
        const auto a = line.find_first_not_of(" \t\r");
        if (a == std::string::npos) continue;
        const auto b = line.find_last_not_of(" \t\r");
        tags.insert(line.substr(a, b - a + 1));
    }
    return tags;
}

/// Frames are decoded lazily on access.
inline FrameSequence load_sequence(const DatasetLayout& layout, const std::string& name) {
    const fs::path dir = layout.root / name;
    if (!fs::is_directory(dir)) throw NotFoundError("sequence directory '" + dir.string() + "' not found");
    const fs::path img_dir = fs::is_directory(dir / layout.image_dir) ? dir / layout.image_dir : dir;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(img_dir))
        if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
    if (files.empty()) throw FormatError("sequence '" + name + "' has no frames");

    FrameSequence seq;
    seq.name = name;
    for (const auto& f : files) seq.frame_ids.push_back(f.filename().string());
    seq.loader = [files](std::size_t i) { return load_image(files.at(i)); };

    const fs::path gt_path = dir / layout.ground_truth_file;
    if (fs::exists(gt_path)) {
        std::ifstream in(gt_path);
        auto boxes = parse_ground_truth(in, gt_path.string());
        if (boxes.size() != files.size())
            throw FormatError("'" + gt_path.string() + "' has " + std::to_string(boxes.size()) + " boxes for " +
                              std::to_string(files.size()) + " frames");
        seq.ground_truth = std::move(boxes);
    } else if (layout.split == Split::test_labeled) {
        throw FormatError("labeled sequence '" + name + "' lacks " + layout.ground_truth_file);
    }
    const fs::path attr_path = dir / layout.attribute_file;
    if (fs::exists(attr_path)) {
        std::ifstream in(attr_path);
        seq.attributes = parse_attributes(in);
    }
    seq.validate();
    return seq;
}

inline std::vector<FrameSequence> load_dataset(const DatasetLayout& layout) {
    std::vector<FrameSequence> out;
    for (const auto& name : list_sequences(layout)) out.push_back(load_sequence(layout, name));
    return out;
}

/// Writes a sequence in the layout read by load_sequence.
inline void save_sequence(const fs::path& root, const FrameSequence& seq, const std::string& image_dir = "img") {
    const fs::path dir = root / seq.name;
    fs::create_directories(dir / image_dir);
    for (std::size_t t = 0; t < seq.size(); ++t) {
        char name[32];
        std::snprintf(name, sizeof name, "%06zu.png", t + 1);
        save_image(dir / image_dir / name, seq.frame(t));
    }
    if (seq.ground_truth) {
        std::ofstream out(dir / "groundtruth_rect.txt", std::ios::binary);
        out.precision(17);
        for (const auto& b : *seq.ground_truth) out << b.x << ',' << b.y << ',' << b.w << ',' << b.h << '\n';
    }
    if (!seq.attributes.empty()) {
        std::ofstream out(dir / "attributes.txt", std::ios::binary);
        for (const auto& a : seq.attributes) out << a << '\n';
    }
}

}  // namespace udat
