#ifndef ABC_H
#define ABC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AbcStatus {
  ABC_STATUS_OK = 0,
  ABC_STATUS_NULL_POINTER = 1,
  ABC_STATUS_INVALID_ARGUMENT = 2,
  ABC_STATUS_IO = 3,
  ABC_STATUS_FORMAT = 4,
  ABC_STATUS_NUMERIC = 5,
  ABC_STATUS_BUFFER_TOO_SMALL = 6,
  ABC_STATUS_PANIC = 7,
} AbcStatus;

typedef enum AbcSide {
  ABC_SIDE_LEFT = 0,
  ABC_SIDE_RIGHT = 1,
} AbcSide;

/**
 * Rollout verdict; `ABC_REASON_SUCCESS` when the episode succeeded.
 */
typedef enum AbcReason {
  ABC_REASON_SUCCESS = 0,
  ABC_REASON_NO_CLOSE = 1,
  ABC_REASON_MULTIPLE_CLOSE = 2,
  ABC_REASON_EARLY_CLOSE = 3,
  ABC_REASON_NOT_CENTERED = 4,
  ABC_REASON_LOST_TARGET = 5,
  ABC_REASON_NUMERIC_FAULT = 6,
} AbcReason;

typedef struct AbcEpisode AbcEpisode;

typedef struct AbcPolicy AbcPolicy;

typedef struct AbcScene AbcScene;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message on this thread into `buf` as a
 * NUL-terminated string, truncating to `len - 1` bytes. Returns the buffer
 * size needed for the whole message.
 */
size_t abc_last_error(char *buf, size_t len);

/**
 * Bytes in one RGB frame.
 */
size_t abc_frame_bytes(void);

/**
 * Side of the square camera image in pixels.
 */
size_t abc_image_size(void);

enum AbcStatus abc_scene_training(enum AbcSide side, uint64_t seed, struct AbcScene **out);

/**
 * Scene with the plant near `azimuth` radians, inside the intermediate band.
 */
enum AbcStatus abc_scene_intermediate(double azimuth, uint64_t seed, struct AbcScene **out);

void abc_scene_free(struct AbcScene *scene);

/**
 * Renders the wrist camera at joint configuration `q` (6 values) into `buf`.
 */
enum AbcStatus abc_scene_render(const struct AbcScene *scene,
                                const double *q,
                                uint8_t *buf,
                                size_t len);

/**
 * Pixel distance from the plant centroid to the image center. `visible` is
 * set to 0 and `error` left untouched when no plant pixel is in view.
 */
enum AbcStatus abc_scene_centering_error(const struct AbcScene *scene,
                                         const double *q,
                                         double *error,
                                         int32_t *visible);

enum AbcStatus abc_policy_load(const char *path_, struct AbcPolicy **out);

void abc_policy_free(struct AbcPolicy *policy);

/**
 * History length and whether the policy predicts joint deltas (1) or
 * absolute joint targets (0).
 */
enum AbcStatus abc_policy_info(const struct AbcPolicy *policy, size_t *history, int32_t *is_delta);

/**
 * Closed-loop rollout of `steps` control steps from the home pose. The
 * recorded trajectory is returned as an episode.
 */
enum AbcStatus abc_rollout(const struct AbcPolicy *policy,
                           const struct AbcScene *scene,
                           size_t steps,
                           struct AbcEpisode **out);

/**
 * Scripted expert demonstration `index` of the set seeded by `master`.
 */
enum AbcStatus abc_episode_expert(uint64_t master, size_t index, struct AbcEpisode **out);

enum AbcStatus abc_episode_read(const char *path_, struct AbcEpisode **out);

enum AbcStatus abc_episode_write(const struct AbcEpisode *episode, const char *path_);

void abc_episode_free(struct AbcEpisode *episode);

/**
 * Number of timesteps in the episode.
 */
enum AbcStatus abc_episode_len(const struct AbcEpisode *episode, size_t *len);

/**
 * Copies the 6 joint values at step `t` into `q`.
 */
enum AbcStatus abc_episode_joints(const struct AbcEpisode *episode, size_t t, double *q);

enum AbcStatus abc_episode_frame(const struct AbcEpisode *episode,
                                 size_t t,
                                 uint8_t *buf,
                                 size_t len);

/**
 * Applies the success criterion to a recorded episode.
 */
enum AbcStatus abc_episode_judge(const struct AbcEpisode *episode, enum AbcReason *reason);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ABC_H */
