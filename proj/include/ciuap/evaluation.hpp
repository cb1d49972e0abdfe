#pragma once

#include "ciuap/classifier.hpp"
#include "ciuap/generator.hpp"
#include "ciuap/impressions.hpp"
#include "ciuap/io.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace ciuap {

struct EvalReport {
    std::string model_id;
    std::string source_id; // UAP or generator id
    std::string dataset_id;
    double success_rate = 0.0; // percent
    int num_samples = 0;
    std::vector<double> label_histogram; // perturbed predictions per class

    io::Json to_json() const;
};

// Order-independent tally of label changes; shards add up to the whole.
struct FoolingCount {
    long fooled = 0;
    long total = 0;
    std::vector<long> histogram;

    FoolingCount& operator+=(const FoolingCount& other);
    double rate() const { return total == 0 ? 0.0 : 100.0 * static_cast<double>(fooled) / static_cast<double>(total); }
};

// x + v is clamped to the pixel range before prediction. clean_labels are
// the victim's predictions on `images`.
FoolingCount count_fooled(const Target& clf, const Tensor& images, std::span<const int> clean_labels,
                          const Tensor& v);

// Percentage of samples whose predicted label changes when v is added.
double success_rate(const Target& clf, const Dataset& d, const Perturbation& v);
EvalReport evaluate_perturbation(const Target& clf, const Dataset& d, const Perturbation& v,
                                 const std::string& source_id);

// Mean success rate of i.i.d. uniform noise in [-xi, xi] over `trials` draws.
double random_noise_baseline(const Target& clf, const Dataset& d, float xi, int trials, std::uint64_t seed);

// Mean success rate of z_samples UAPs drawn from g (latents from `seed`).
double generator_success_rate(const GeneratorModel& g, const Target& clf, const Dataset& d, int z_samples,
                              std::uint64_t seed);

struct TransferMatrix {
    std::vector<std::string> source_models;
    std::vector<std::string> victim_models;
    std::vector<std::vector<double>> rates; // [source][victim], percent
    std::vector<double> mean_per_source;

    std::string to_csv() const;
};

// Entry (i, j) is the mean success rate over z_samples UAPs from generator i
// on victim j. Every generator uses the same latent draws.
TransferMatrix transfer_matrix(const std::vector<const GeneratorModel*>& generators,
                               const std::vector<std::string>& source_ids, const std::vector<const Target*>& victims,
                               const Dataset& d, int z_samples, std::uint64_t seed);

// Smallest number of labels whose share of the histogram reaches coverage,
// taking labels from most to least frequent.
int labels_for_coverage(std::span<const double> histogram, double coverage);
// Mean histogram of perturbed predictions over the UAPs, then labels_for_coverage.
int label_diversity(const Target& clf, const Dataset& d, const std::vector<Perturbation>& uaps, double coverage);
std::vector<double> mean_label_histogram(const Target& clf, const Dataset& d, const std::vector<Perturbation>& uaps);

struct InterpolationPoint {
    double alpha = 0.0;
    Perturbation uap;
    double success_rate = 0.0;
};

// UAPs at `steps` evenly spaced points on the segment z1 -> z2, endpoints
// included and generated from z1, z2 directly. Previews and a rate table are
// written to out_dir when given.
std::vector<InterpolationPoint> interpolate_eval(const GeneratorModel& g, const LatentVector& z1,
                                                 const LatentVector& z2, int steps, const Target& clf,
                                                 const Dataset& d, const std::filesystem::path& out_dir = {});

struct FinetuneOptions {
    int batch_size = 64;
    double learning_rate = 5e-4;
    int eval_z_samples = 10;
    std::uint64_t seed = 0;
};

struct FinetuneResult {
    ClassifierHandle model;
    double sr_before = 0.0;
    double sr_after = 0.0;
};

// Finetunes a copy of clf on batches where a `mix` fraction of the samples
// carry freshly generated UAPs (true labels kept). Success rates of g are
// measured on eval_data against the original and the finetuned model with
// the same latents.
FinetuneResult adversarial_finetune(const ClassifierHandle& clf, const GeneratorModel& g, const Dataset& train_data,
                                    const Dataset& eval_data, int epochs, double mix = 0.5,
                                    const FinetuneOptions& opts = {});

struct RetrainResult {
    ImpressionDataset impressions;
    GeneratorModel generator;
    double recovered_success_rate = 0.0;
    io::Json manifest;
};

struct RetrainOptions {
    int per_class = 10;
    ImpressionConfig impression_config;
    TrainConfig train_config;
    std::uint64_t seed = 0; // impression seed; generator seed comes from train_config
    int eval_z_samples = 10;
};

// Synthesizes fresh impressions from the finetuned model and trains a new
// generator against it; reports its success rate on eval_data.
RetrainResult retrain_against(const ClassifierHandle& clf_new, const Dataset& eval_data, const RetrainOptions& opts,
                              const std::filesystem::path& out_dir = {});

} // namespace ciuap
