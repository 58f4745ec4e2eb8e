#pragma once

#include <cstdint>
#include <vector>

#include "spx/core.hpp"
#include "spx/image.hpp"

namespace spx {

constexpr int kIgnoreLabel = 255;

// Row = ground truth class, column = predicted class. Integer counts merge
// associatively, so sharded evaluation stays exact.
struct ConfusionMatrix {
  int n_classes = 0;
  std::vector<std::int64_t> counts;

  explicit ConfusionMatrix(int classes = 0)
      : n_classes(classes),
        counts(static_cast<std::size_t>(classes) * classes, 0) {}

  void add(int gt, int pred) {
    if (gt == kIgnoreLabel) return;
    check(gt >= 0 && gt < n_classes && pred >= 0 && pred < n_classes,
          "ConfusionMatrix: label out of range");
    ++counts[static_cast<std::size_t>(gt) * n_classes + pred];
  }

  void add_map(const IdMap& pred, const LabelMap& gt) {
    check(pred.h == gt.h && pred.w == gt.w,
          "ConfusionMatrix: prediction and ground truth dims differ");
    for (std::size_t i = 0; i < pred.ids.size(); ++i)
      add(gt.ids[i], pred.ids[i]);
  }

  void merge(const ConfusionMatrix& other) {
    check(n_classes == other.n_classes, "ConfusionMatrix: class count differs");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  }
};

struct IouReport {
  std::vector<double> per_class;   // IoU_c = TP / (TP + FP + FN)
  std::vector<bool> present;       // false when absent from pred and gt
  double mean = 0.0;               // over present classes only
};

inline IouReport mean_iou(const ConfusionMatrix& cm) {
  IouReport rep;
  rep.per_class.assign(static_cast<std::size_t>(cm.n_classes), 0.0);
  rep.present.assign(static_cast<std::size_t>(cm.n_classes), false);
  double sum = 0;
  int n_present = 0;
  for (int c = 0; c < cm.n_classes; ++c) {
    std::int64_t tp = cm.counts[static_cast<std::size_t>(c) * cm.n_classes + c];
    std::int64_t fp = 0, fn = 0;
    for (int o = 0; o < cm.n_classes; ++o) {
      if (o == c) continue;
      fp += cm.counts[static_cast<std::size_t>(o) * cm.n_classes + c];
      fn += cm.counts[static_cast<std::size_t>(c) * cm.n_classes + o];
    }
    if (tp + fp + fn == 0) continue;  // absent from both pred and gt
    rep.present[static_cast<std::size_t>(c)] = true;
    rep.per_class[static_cast<std::size_t>(c)] =
        static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
    sum += rep.per_class[static_cast<std::size_t>(c)];
    ++n_present;
  }
  rep.mean = n_present > 0 ? sum / n_present : 0.0;
  return rep;
}

inline IouReport mean_iou(const IdMap& pred, const LabelMap& gt, int n_classes) {
  ConfusionMatrix cm(n_classes);
  cm.add_map(pred, gt);
  return mean_iou(cm);
}

}  // namespace spx
