#include <math.h>
#include <stdio.h>
#include <string.h>

#include "occflow.h"

/* Usage: smoke <checkpoint-dir> <scenario.json>. Prints one line per query:
 * "<occ_prob> <flow_dx> <flow_dy>" with 17 significant digits. */
int main(int argc, char **argv) {
    if (argc != 3) {
        return 64;
    }
    OccflowModel *model = NULL;
    OccflowStatus s = occflow_model_load(argv[1], &model);
    if (s != OCCFLOW_STATUS_OK) {
        char msg[256];
        occflow_last_error_message(msg, sizeof msg);
        fprintf(stderr, "load: %d %s\n", (int)s, msg);
        return 1;
    }
    OccflowModelInfo info;
    if (occflow_model_info(model, &info) != OCCFLOW_STATUS_OK || !info.has_implicit) {
        return 2;
    }
    OccflowFeatures *features = NULL;
    if (occflow_encode_scenario(model, argv[2], NULL, &features) != OCCFLOW_STATUS_OK) {
        return 3;
    }
    OccflowQuery qs[3] = {{0.0, 0.0, 0.0}, {1.25, -2.5, 1.0}, {-3.0, 4.0, info.horizon_s}};
    OccflowPrediction out[3];
    memset(out, 0, sizeof out);
    if (occflow_decode(model, features, OCCFLOW_DECODER_IMPLICIT, qs, 3, out) != OCCFLOW_STATUS_OK) {
        return 4;
    }
    for (int i = 0; i < 3; i++) {
        if (!(out[i].occ_prob > 0.0 && out[i].occ_prob < 1.0) || !isfinite(out[i].flow_dx)) {
            return 5;
        }
        printf("%.17g %.17g %.17g\n", out[i].occ_prob, out[i].flow_dx, out[i].flow_dy);
    }
    /* Errors come back as codes, never as crashes. */
    if (occflow_decode(model, features, OCCFLOW_DECODER_IMPLICIT, NULL, 3, out) != OCCFLOW_STATUS_NULL_ARGUMENT) {
        return 6;
    }
    occflow_features_free(features);
    occflow_model_free(model);
    return 0;
}
