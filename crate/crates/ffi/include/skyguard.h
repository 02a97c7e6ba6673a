#ifndef SKYGUARD_H
#define SKYGUARD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Number of features in one drone's observation.
#define SG_OBS_DIM 12

typedef enum SgOutcome {
  SG_OUTCOME_RUNNING = 0,
  SG_OUTCOME_WIN = 1,
  SG_OUTCOME_LOSS = 2,
  SG_OUTCOME_TIMEOUT = 3,
} SgOutcome;

typedef enum SgScenario {
  SG_SCENARIO_SIMPLE = 0,
  SG_SCENARIO_COMPLEX = 1,
} SgScenario;

// Result code of every fallible call.
typedef enum SgStatus {
  SG_STATUS_OK = 0,
  SG_STATUS_NULL_POINTER = 1,
  SG_STATUS_INVALID_ARGUMENT = 2,
  SG_STATUS_IO = 3,
  SG_STATUS_SIMULATION = 4,
  SG_STATUS_EPISODE_OVER = 5,
  SG_STATUS_PANIC = 6,
} SgStatus;

// Decision rule mapping observations to actions.
typedef struct SgPolicy SgPolicy;

// One running episode.
typedef struct SgWorld SgWorld;

typedef struct SgMwuResult {
  double u;
  double p_two_sided;
  double effect_rank_biserial;
  // 1 when the exact null distribution was used, 0 for the normal approximation.
  int32_t exact;
} SgMwuResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *sg_last_error(void);

// Spawns a new episode. `mini` selects the small world.
enum SgStatus sg_world_new(enum SgScenario scenario,
                           uint64_t seed,
                           int32_t mini,
                           struct SgWorld **out);

// Releases a world. Null is ignored.
void sg_world_free(struct SgWorld *world);

size_t sg_world_blue_count(const struct SgWorld *world);

uint32_t sg_world_tick(const struct SgWorld *world);

enum SgOutcome sg_world_outcome(const struct SgWorld *world);

// Copies drone `drone`'s observation into `out[0..SG_OBS_DIM]`.
enum SgStatus sg_world_observation(const struct SgWorld *world,
                                   size_t drone,
                                   double *out,
                                   size_t len);

// Writes `x, y, heading` of blue drone `drone` into `out[0..3]`.
enum SgStatus sg_world_blue_pose(const struct SgWorld *world, size_t drone, double *out);

// Writes the red drone's `x, y` into `out[0..2]`.
enum SgStatus sg_world_red_position(const struct SgWorld *world, double *out);

// Advances one tick. `actions` holds one entry per blue drone: 0 turns
// clockwise (input -1), 1 counter-clockwise (input +1). `rewards`, if not
// null, receives one reward per drone.
enum SgStatus sg_world_step(struct SgWorld *world,
                            const uint8_t *actions,
                            size_t n,
                            double *rewards);

// Greedy policy from a JSON checkpoint file.
enum SgStatus sg_policy_load(const char *path, struct SgPolicy **out);

// Hand-written pursuit controller.
enum SgStatus sg_policy_heuristic(struct SgPolicy **out);

// Uniformly random actions.
enum SgStatus sg_policy_random(uint64_t seed, struct SgPolicy **out);

void sg_policy_free(struct SgPolicy *policy);

// Writes one action per blue drone of `world` into `out[0..n]`.
enum SgStatus sg_policy_act(struct SgPolicy *policy,
                            const struct SgWorld *world,
                            uint8_t *out,
                            size_t n);

// Greedy success rate of `policy` over `episodes` evaluation scenarios.
enum SgStatus sg_evaluate(struct SgPolicy *policy,
                          enum SgScenario scenario,
                          int32_t mini,
                          size_t episodes,
                          uint64_t seed,
                          double *out_success_rate);

// Two-sided Mann-Whitney U test of sample `a` against sample `b`.
enum SgStatus sg_mann_whitney(const double *a,
                              size_t na,
                              const double *b,
                              size_t nb,
                              struct SgMwuResult *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SKYGUARD_H */
