#include <stdio.h>
#include <string.h>

#include "abc.h"

#define CHECK(cond)                                                   \
    do {                                                              \
        if (!(cond)) {                                                \
            fprintf(stderr, "%s:%d: %s\n", __FILE__, __LINE__, #cond); \
            return 1;                                                 \
        }                                                             \
    } while (0)

int main(void) {
    static unsigned char frame[64 * 64 * 3];
    const double home[6] = {0, 0, 0, 0, 0, 1};
    AbcScene *scene = NULL;
    AbcEpisode *ep = NULL;
    AbcReason reason = ABC_REASON_NO_CLOSE;
    size_t len = 0;
    char msg[64];
    int ink = 0;

    CHECK(abc_frame_bytes() == sizeof frame);
    CHECK(abc_scene_training(ABC_SIDE_LEFT, 0, &scene) == ABC_STATUS_OK);
    CHECK(abc_scene_render(scene, home, frame, sizeof frame) == ABC_STATUS_OK);
    for (size_t i = 0; i < sizeof frame; i++) {
        ink += frame[i] != 255;
    }
    CHECK(ink > 0);

    CHECK(abc_scene_render(NULL, home, frame, sizeof frame) == ABC_STATUS_NULL_POINTER);
    CHECK(abc_last_error(msg, sizeof msg) == strlen("scene is null") + 1);
    CHECK(strcmp(msg, "scene is null") == 0);

    CHECK(abc_episode_expert(1, 0, &ep) == ABC_STATUS_OK);
    CHECK(abc_episode_len(ep, &len) == ABC_STATUS_OK);
    CHECK(len > 1);
    CHECK(abc_episode_judge(ep, &reason) == ABC_STATUS_OK);
    CHECK(reason == ABC_REASON_SUCCESS);

    abc_episode_free(ep);
    abc_scene_free(scene);
    printf("ok\n");
    return 0;
}
