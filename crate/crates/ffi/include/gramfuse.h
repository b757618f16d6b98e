#ifndef GRAMFUSE_H
#define GRAMFUSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GfStatus {
  GF_STATUS_OK = 0,
  GF_STATUS_NULL_ARGUMENT = 1,
  GF_STATUS_INVALID_INPUT = 2,
  GF_STATUS_FORMAT = 3,
  GF_STATUS_IO = 4,
  GF_STATUS_NON_FINITE = 5,
  GF_STATUS_UNPARSEABLE = 6,
  GF_STATUS_INTERNAL = 7,
  GF_STATUS_PANIC = 8,
} GfStatus;

/*
 A fixed grammar given by explicit log-probability tables.
 */
typedef struct GfGrammar GfGrammar;

/*
 A trained grammar loaded from a checkpoint.
 */
typedef struct GfParser GfParser;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *gf_version(void);

/*
 Message of the last failed call on this thread, empty after a success.
 Valid until the next call into the library on the same thread.
 */
const char *gf_last_error(void);

/*
 # Safety
 `s` must come from this library and not have been freed.
 */
void gf_string_free(char *s);

/*
 Loads a checkpoint written by `gramfuse train`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GfStatus gf_parser_open(const char *path, struct GfParser **out);

/*
 # Safety
 `p` must come from [`gf_parser_open`] and not have been freed.
 */
void gf_parser_free(struct GfParser *p);

/*
 Vocabulary size including the unknown-word entry; 0 for a null handle.

 # Safety
 `p` must be null or a live parser.
 */
size_t gf_parser_vocab_size(const struct GfParser *p);

/*
 Parses one whitespace-separated sentence. Punctuation is dropped and
 words are lowercased as in training. `*out` receives a bracketed tree
 such as `(X (X the dog) barks)`, to be released with [`gf_string_free`].

 # Safety
 `p` must be a live parser, `sentence` NUL-terminated, `out` valid.
 */
enum GfStatus gf_parser_parse(const struct GfParser *p, const char *sentence, char **out);

/*
 Builds a grammar from row-normalized log-probability tables: `root`
 has `nt` entries, `binary` `nt * (nt+pt)^2` (row `A`, then `B`, then
 `C`), `lexical` `pt * vocab`. Categories `0..nt` are nonterminals and
 `nt..nt+pt` preterminals.

 # Safety
 Each table pointer must reference the stated number of doubles.
 */
enum GfStatus gf_grammar_new(size_t nt,
                             size_t pt,
                             size_t vocab,
                             const double *root,
                             const double *binary,
                             const double *lexical,
                             struct GfGrammar **out);

/*
 # Safety
 `g` must come from [`gf_grammar_new`] and not have been freed.
 */
void gf_grammar_free(struct GfGrammar *g);

/*
 Sentence log-likelihood by the inside algorithm.

 # Safety
 `tokens` must reference `n` word ids; `out` must be valid.
 */
enum GfStatus gf_grammar_inside(const struct GfGrammar *g,
                                const size_t *tokens,
                                size_t n,
                                double *out);

/*
 Posterior span marginals into `out[i * n + j]` for `i <= j`; the
 lower triangle is zeroed.

 # Safety
 `tokens` must reference `n` ids and `out` room for `n * n` doubles.
 */
enum GfStatus gf_grammar_span_marginals(const struct GfGrammar *g,
                                        const size_t *tokens,
                                        size_t n,
                                        double *out);

/*
 Best tree. `spans` receives `(first, last)` pairs for the `n - 1`
 constituents of width at least 2 in ascending order, so it needs room
 for `2 * (n - 1)` values; `*count` is set to the pair count.

 # Safety
 `tokens` must reference `n` ids; `spans` must hold `2 * (n - 1)` values.
 */
enum GfStatus gf_grammar_viterbi(const struct GfGrammar *g,
                                 const size_t *tokens,
                                 size_t n,
                                 double *score,
                                 size_t *spans,
                                 size_t *count);

/*
 Corpus and sentence F1 (percent) between newline-separated bracketed
 trees. Sentences whose gold tree has no nontrivial span are skipped.

 # Safety
 Both texts must be NUL-terminated; `c_f1` and `s_f1` must be valid.
 */
enum GfStatus gf_f1(const char *predicted, const char *gold, double *c_f1, double *s_f1);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRAMFUSE_H */
