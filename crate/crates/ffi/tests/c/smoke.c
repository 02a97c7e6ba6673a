#include <stdio.h>
#include <string.h>
#include "skyguard.h"

/* Plays one mini episode with the heuristic policy and runs one MWU test.
   Prints "outcome=<n> ticks=<n> u=<u> p=<p>" on success. */
int main(void) {
    SgWorld *world = NULL;
    SgPolicy *policy = NULL;
    if (sg_world_new(SG_SCENARIO_SIMPLE, 7, 1, &world) != SG_STATUS_OK) return 10;
    if (sg_policy_heuristic(&policy) != SG_STATUS_OK) return 11;
    size_t n = sg_world_blue_count(world);
    uint8_t actions[16];
    double obs[SG_OBS_DIM];
    if (sg_world_observation(world, 0, obs, SG_OBS_DIM) != SG_STATUS_OK) return 12;
    while (sg_world_outcome(world) == SG_OUTCOME_RUNNING) {
        if (sg_policy_act(policy, world, actions, n) != SG_STATUS_OK) return 13;
        if (sg_world_step(world, actions, n, NULL) != SG_STATUS_OK) return 14;
    }
    if (sg_world_step(world, actions, n, NULL) != SG_STATUS_EPISODE_OVER) return 15;
    const char *err = sg_last_error();
    if (err == NULL || strstr(err, "ended") == NULL) return 16;

    double a[] = {1, 2, 3}, b[] = {4, 5, 6, 7};
    SgMwuResult r;
    if (sg_mann_whitney(a, 3, b, 4, &r) != SG_STATUS_OK) return 17;
    printf("outcome=%d ticks=%u u=%g p=%.6f exact=%d\n", (int)sg_world_outcome(world), sg_world_tick(world), r.u,
           r.p_two_sided, r.exact);
    sg_policy_free(policy);
    sg_world_free(world);
    return 0;
}
