#pragma once

#include "ciuap/tensor.hpp"

#include <string>
#include <vector>

namespace ciuap {

struct PixelRange {
    float low = 0.0F;
    float high = 255.0F;
};

// Labeled images in raw pixel units, NCHW.
struct Dataset {
    std::string id;
    Tensor images;
    std::vector<int> labels;
    int num_classes = 0;
    PixelRange pixel_range;

    int size() const { return images.shape().n; }
    Shape sample_shape() const { return images.shape().with_batch(1); }
    Dataset subset(int begin, int count) const;
};

struct DatasetSplits {
    Dataset train;
    Dataset test;
};

// Registered dataset ids:
//   toy-2class-linear  four separable 2-pixel points, two classes
//   gratings10         procedurally generated 32x32x3 oriented gratings, ten classes
//   cifar10-small      CIFAR-10 binary batches read from $CIUAP_DATA/cifar-10-batches-bin
// Unknown ids or missing files raise ConfigError.
DatasetSplits load_dataset(const std::string& id);
std::vector<std::string> dataset_ids();

// Per-channel mean and standard deviation of a dataset's images.
std::pair<std::vector<float>, std::vector<float>> channel_statistics(const Dataset& d);

} // namespace ciuap
