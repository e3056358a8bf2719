#ifndef MOTHWATCH_H
#define MOTHWATCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum MwStatus {
  MW_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  MW_STATUS_NULL_ARGUMENT = 1,
  /**
   * Bad input: a malformed argument, box, config or checkpoint.
   */
  MW_STATUS_INVALID = 2,
  /**
   * A file could not be found or read.
   */
  MW_STATUS_IO = 3,
  /**
   * The computation itself failed.
   */
  MW_STATUS_RUNTIME = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  MW_STATUS_PANIC = 5,
} MwStatus;

typedef struct MwClassifier MwClassifier;

typedef struct MwDetector MwDetector;

typedef struct MwPipeline MwPipeline;

/**
 * Pixel-space box `[x_min, x_max) x [y_min, y_max)`.
 */
typedef struct MwBox {
  double x_min;
  double y_min;
  double x_max;
  double y_max;
} MwBox;

typedef struct MwDetection {
  struct MwBox bbox;
  double score;
} MwDetection;

/**
 * One classified detection of a pipeline run.
 */
typedef struct MwPipelineDetection {
  struct MwBox bbox;
  double score;
  size_t class_index;
  double confidence;
} MwPipelineDetection;

/**
 * Image-level outcome of a pipeline run.
 */
typedef struct MwPipelineSummary {
  size_t class_index;
  /**
   * Number of detections; may exceed the capacity passed in.
   */
  size_t detections;
  /**
   * 1 when nothing was detected and the full image was classified.
   */
  int32_t fallback;
} MwPipelineSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *mw_last_error(void);

/**
 * Load a detector checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MwStatus mw_detector_load(const char *path, struct MwDetector **out);

/**
 * Detect moths in a row-major interleaved RGB image.
 *
 * Up to `capacity` detections are written to `out`; `count` receives the
 * total number found.
 *
 * # Safety
 * `rgb` must hold `3 * width * height` bytes, `out` room for `capacity`
 * detections, and `det` must come from [`mw_detector_load`].
 */
enum MwStatus mw_detector_detect(const struct MwDetector *det,
                                 const uint8_t *rgb,
                                 size_t width,
                                 size_t height,
                                 struct MwDetection *out,
                                 size_t capacity,
                                 size_t *count);

/**
 * # Safety
 * `det` must be null or come from [`mw_detector_load`], and not be used afterwards.
 */
void mw_detector_free(struct MwDetector *det);

/**
 * Load a classifier checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MwStatus mw_classifier_load(const char *path, struct MwClassifier **out);

/**
 * Classify a cropped RGB image, mining parts when the model has a selector.
 *
 * # Safety
 * `rgb` must hold `3 * width * height` bytes; the out pointers must be valid.
 */
enum MwStatus mw_classifier_classify(const struct MwClassifier *clf,
                                     const uint8_t *rgb,
                                     size_t width,
                                     size_t height,
                                     size_t *class_index,
                                     double *confidence);

/**
 * Number of species the classifier knows.
 *
 * # Safety
 * `clf` must come from [`mw_classifier_load`]; `count` must be valid.
 */
enum MwStatus mw_classifier_num_classes(const struct MwClassifier *clf, size_t *count);

/**
 * Species name of a class index; the string lives as long as the handle.
 *
 * # Safety
 * `clf` must come from [`mw_classifier_load`]; `name` must be valid.
 */
enum MwStatus mw_classifier_class_name(const struct MwClassifier *clf,
                                       size_t index,
                                       const char **name);

/**
 * # Safety
 * `clf` must be null or come from [`mw_classifier_load`], and not be used afterwards.
 */
void mw_classifier_free(struct MwClassifier *clf);

/**
 * Load both checkpoints and, optionally, a TOML config for the pipeline
 * options (`config` may be null for the defaults).
 *
 * # Safety
 * Paths must be NUL-terminated strings and `out` a valid pointer.
 */
enum MwStatus mw_pipeline_load(const char *detector_path,
                               const char *classifier_path,
                               const char *config,
                               struct MwPipeline **out);

/**
 * Detect, crop, classify and reduce one RGB image.
 *
 * # Safety
 * `rgb` must hold `3 * width * height` bytes, `out` room for `capacity`
 * entries, and `summary` must be valid.
 */
enum MwStatus mw_pipeline_run(const struct MwPipeline *pipeline,
                              const uint8_t *rgb,
                              size_t width,
                              size_t height,
                              struct MwPipelineDetection *out,
                              size_t capacity,
                              struct MwPipelineSummary *summary);

/**
 * # Safety
 * `pipeline` must be null or come from [`mw_pipeline_load`], and not be used afterwards.
 */
void mw_pipeline_free(struct MwPipeline *pipeline);

/**
 * Intersection over union of two boxes.
 *
 * # Safety
 * All pointers must be valid.
 */
enum MwStatus mw_iou(const struct MwBox *a, const struct MwBox *b, double *out);

/**
 * Greedy non-maximum suppression; survivors are written in score order.
 *
 * # Safety
 * `boxes` must hold `n` entries, `out` room for `capacity`; `count` must be valid.
 */
enum MwStatus mw_nms(const struct MwDetection *boxes,
                     size_t n,
                     double iou_threshold,
                     size_t max_keep,
                     struct MwDetection *out,
                     size_t capacity,
                     size_t *count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOTHWATCH_H */
