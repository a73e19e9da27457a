/* C ABI for the toqnet library.
 *
 * Every handle returned by a *_load/compile function must be released
 * with the matching *_free. Strings returned by toq_last_error_message
 * must be released with toq_string_free. All functions are safe to call
 * with null handles (they fail with TOQ_ERR_ARG). Error messages are
 * per-thread.
 */

#ifndef TOQNET_H
#define TOQNET_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define TOQ_OK 0
/* Null pointer, invalid UTF-8, or out-of-range argument. */
#define TOQ_ERR_ARG 1
/* Parse, validation, fragment, or I/O failure. */
#define TOQ_ERR_INVALID 2
/* Unexpected internal failure. */
#define TOQ_ERR_INTERNAL 3

/* An in-memory model (trained or compiled). */
typedef struct ToqModel ToqModel;
/* A formula compiled to exact weights, with its verification metadata. */
typedef struct ToqCompiled ToqCompiled;

/* Last error on this thread as a fresh allocation, or NULL. */
char *toq_last_error_message(void);
void toq_string_free(char *s);

/* Loads a model checkpoint (JSON). NULL on failure. */
ToqModel *toq_model_load_json(const char *path);
void toq_model_free(ToqModel *m);

/* Evaluates the model on a JSONL dataset; writes the macro accuracy. */
int toq_model_eval_dataset(const ToqModel *m,
                           const char *dataset_path,
                           double *out_macro_acc);

/* Compiles a formula to exact weights. hard_mode != 0 selects step
 * activations; otherwise sigmoid with the given gain. NULL on failure
 * (parse error or unsupported fragment). */
ToqCompiled *toq_compile(const char *formula,
                         int hard_mode,
                         double gain,
                         int k_rrl,
                         int l_trl);
void toq_compiled_free(ToqCompiled *c);

/* Checks a compiled network against the logic oracle over traces of the
 * given shape: exhaustive when the trace space is small, otherwise
 * `limit` samples drawn from `seed`. */
int toq_verify(const ToqCompiled *c,
               int t_len,
               int n_entities,
               int limit,
               uint64_t seed,
               int *out_mismatches,
               double *out_max_dev);

#ifdef __cplusplus
}
#endif

#endif /* TOQNET_H */
