#pragma once

#include "ciuap/classifier.hpp"
#include "ciuap/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <unistd.h>

namespace test_support {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag)
    {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("ciuap-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

// Small desk CNN shared between test processes through an on-disk cache.
inline ciuap::ClassifierHandle desk_classifier(const std::string& arch = "cnn-3layer")
{
    const std::filesystem::path cache = CIUAP_TEST_CACHE;
    const std::string id = "test-gratings10-" + arch;
    if (ciuap::classifier_exists(cache, id)) return ciuap::load_classifier(cache, id);
    ciuap::ClassifierTrainOptions opts;
    opts.epochs = 3;
    const auto trained = ciuap::train_classifier("gratings10", arch, 7, opts);
    ciuap::ClassifierInfo info = trained.info();
    info.model_id = id;
    ciuap::ClassifierHandle clf(info, trained.network());
    ciuap::save_classifier(clf, cache);
    return clf;
}

inline double rel_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

} // namespace test_support
