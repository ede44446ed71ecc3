#ifndef JOINTDISTILL_H
#define JOINTDISTILL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum JdStatus {
  JD_STATUS_OK = 0,
  JD_STATUS_NULL_POINTER = 1,
  JD_STATUS_INVALID_ARGUMENT = 2,
  JD_STATUS_SHAPE_MISMATCH = 3,
  JD_STATUS_CONFIG = 4,
  JD_STATUS_NUMERICAL_ABORT = 5,
  JD_STATUS_CHECKPOINT = 6,
  JD_STATUS_IO = 7,
  JD_STATUS_PANIC = 8,
} JdStatus;

/**
 * Dynamic task-weight controller.
 */
typedef struct JdController JdController;

/**
 * A loaded teacher or student network.
 */
typedef struct JdModel JdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (truncated and
 * NUL-terminated) and returns its full length in bytes, without the NUL.
 * Pass a null `buf` to query the length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t jd_last_error_message(char *buf, size_t len);

/**
 * New controller for `n_tasks` tasks with all weights at 1.
 * `higher_better[i]` is nonzero when task i's score improves upward.
 *
 * # Safety
 * `r_teacher0` and `higher_better` must hold `n_tasks` values; `out` must
 * be writable.
 */
enum JdStatus jd_controller_new(size_t n_tasks,
                                const double *r_teacher0,
                                const uint8_t *higher_better,
                                double alpha,
                                double beta,
                                double momentum,
                                struct JdController **out);

/**
 * Replaces the teacher reference scores.
 *
 * # Safety
 * `ctl` must come from [`jd_controller_new`]; `r_teacher0` must hold `n`
 * values.
 */
enum JdStatus jd_controller_set_teacher_scores(struct JdController *ctl,
                                               const double *r_teacher0,
                                               size_t n);

/**
 * One weight update from precomputed feedback scores.
 *
 * # Safety
 * `ctl` must come from [`jd_controller_new`]; `a` must hold `n` values.
 */
enum JdStatus jd_controller_update(struct JdController *ctl, const double *a, size_t n);

/**
 * Feedback scores from student scores, then a weight update. The feedback
 * scores are written to `a_out` when it is not null.
 *
 * # Safety
 * `ctl` must come from [`jd_controller_new`]; `r_student` must hold `n`
 * values and `a_out` must be null or hold `n`.
 */
enum JdStatus jd_controller_tick(struct JdController *ctl,
                                 const double *r_student,
                                 size_t n,
                                 double *a_out);

/**
 * Copies the current weights into `out`.
 *
 * # Safety
 * `ctl` must come from [`jd_controller_new`]; `out` must hold `n` values.
 */
enum JdStatus jd_controller_omega(const struct JdController *ctl, double *out, size_t n);

/**
 * # Safety
 * `ctl` must be null or come from [`jd_controller_new`] and not be used
 * afterwards.
 */
void jd_controller_free(struct JdController *ctl);

/**
 * Mean IoU over the classes present in prediction or ground truth.
 *
 * # Safety
 * `pred` and `gt` must hold `n` labels; `out` must be writable.
 */
enum JdStatus jd_miou(const uint32_t *pred,
                      const uint32_t *gt,
                      size_t n,
                      size_t classes,
                      double *out);

/**
 * # Safety
 * `pred` and `gt` must hold `n` labels; `out` must be writable.
 */
enum JdStatus jd_pixel_acc(const uint32_t *pred, const uint32_t *gt, size_t n, double *out);

/**
 * Mean absolute and mean relative depth error.
 *
 * # Safety
 * `pred` and `gt` must hold `n` values; both outputs must be writable.
 */
enum JdStatus jd_depth_errors(const double *pred,
                              const double *gt,
                              size_t n,
                              double *abs_err,
                              double *rel_err);

/**
 * Overall improvement in percent of `values` over `baseline`, criterion by
 * criterion.
 *
 * # Safety
 * The three arrays must hold `n` values; `out` must be writable.
 */
enum JdStatus jd_delta_mtl(const double *values,
                           const double *baseline,
                           const uint8_t *higher_better,
                           size_t n,
                           double *out);

/**
 * Renders one scene: `image` gets 3 x h x w channel-major values, `seg`
 * and `depth` get h x w values each.
 *
 * # Safety
 * The output buffers must have the sizes above.
 */
enum JdStatus jd_scene_generate(uint64_t seed,
                                size_t h,
                                size_t w,
                                double *image,
                                uint8_t *seg,
                                double *depth);

/**
 * Loads a checkpoint written by the training harness.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum JdStatus jd_model_load(const char *path, struct JdModel **out);

/**
 * Number of output heads.
 *
 * # Safety
 * `model` must come from [`jd_model_load`]; `out` must be writable.
 */
enum JdStatus jd_model_num_heads(const struct JdModel *model, size_t *out);

/**
 * Output channels of head `head`.
 *
 * # Safety
 * `model` must come from [`jd_model_load`]; `out` must be writable.
 */
enum JdStatus jd_model_head_channels(const struct JdModel *model, size_t head, size_t *out);

/**
 * Eval-mode forward of `n` images of 3 x h x w. Writes head `head`'s
 * output, n x channels x h x w values, into `out` of length `out_len`.
 *
 * # Safety
 * `model` must come from [`jd_model_load`]; `images` must hold
 * n * 3 * h * w values and `out` `out_len`.
 */
enum JdStatus jd_model_predict(const struct JdModel *model,
                               const double *images,
                               size_t n,
                               size_t h,
                               size_t w,
                               size_t head,
                               double *out,
                               size_t out_len);

/**
 * # Safety
 * `model` must be null or come from [`jd_model_load`] and not be used
 * afterwards.
 */
void jd_model_free(struct JdModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* JOINTDISTILL_H */
