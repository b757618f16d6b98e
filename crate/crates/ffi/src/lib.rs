//! C ABI over `gramfuse`.
//!
//! Every function returns a [`GfStatus`]; on failure the message is kept
//! per thread and read back with [`gf_last_error`]. Handles are opaque and
//! must be released with their `_free` function. Strings handed out by the
//! library are released with [`gf_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use gramfuse::chartkernel::{posterior, viterbi_scored, GrammarSizes, RuleTensors};
use gramfuse::dataio::{tokenize, Punctuation};
use gramfuse::evaluation::f1_scores;
use gramfuse::trainer::TrainedModel;
use gramfuse::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidInput = 2,
    Format = 3,
    Io = 4,
    NonFinite = 5,
    Unparseable = 6,
    Internal = 7,
    Panic = 8,
}

impl From<&Error> for GfStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Input(_) | Error::UnsupportedLength(_) | Error::TooManyTrees(_) | Error::Shape { .. } => {
                GfStatus::InvalidInput
            }
            Error::Syntax { .. } | Error::Format { .. } | Error::Json(_) => GfStatus::Format,
            Error::Io { .. } => GfStatus::Io,
            Error::NonFinite(_) => GfStatus::NonFinite,
            Error::Unparseable => GfStatus::Unparseable,
        }
    }
}

/// A trained grammar loaded from a checkpoint.
pub struct GfParser {
    model: TrainedModel,
    punct: Punctuation,
}

/// A fixed grammar given by explicit log-probability tables.
pub struct GfGrammar {
    rules: RuleTensors,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(GfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(GfStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(GfStatus::NullArgument, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GfStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            GfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(GfStatus::InvalidInput, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

fn out_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail(GfStatus::Internal, "output contains a NUL byte".into()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, empty after a success.
/// Valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn gf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn gf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a checkpoint written by `gramfuse train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gf_parser_open(path: *const c_char, out: *mut *mut GfParser) -> GfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let model = TrainedModel::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(GfParser {
            model,
            punct: Punctuation::default(),
        }));
        Ok(())
    })
}

/// # Safety
/// `p` must come from [`gf_parser_open`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn gf_parser_free(p: *mut GfParser) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Vocabulary size including the unknown-word entry; 0 for a null handle.
///
/// # Safety
/// `p` must be null or a live parser.
#[no_mangle]
pub unsafe extern "C" fn gf_parser_vocab_size(p: *const GfParser) -> usize {
    p.as_ref().map_or(0, |p| p.model.vocab.len())
}

/// Parses one whitespace-separated sentence. Punctuation is dropped and
/// words are lowercased as in training. `*out` receives a bracketed tree
/// such as `(X (X the dog) barks)`, to be released with [`gf_string_free`].
///
/// # Safety
/// `p` must be a live parser, `sentence` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn gf_parser_parse(
    p: *const GfParser,
    sentence: *const c_char,
    out: *mut *mut c_char,
) -> GfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let p = p.as_ref().ok_or_else(|| null("parser"))?;
        let tokens = p.punct.normalize(&tokenize(str_arg(sentence, "sentence")?));
        let tree = p.model.parse(&tokens)?;
        *out = out_string(tree.to_bracketed(&tokens)?)?;
        Ok(())
    })
}

/// Builds a grammar from row-normalized log-probability tables: `root`
/// has `nt` entries, `binary` `nt * (nt+pt)^2` (row `A`, then `B`, then
/// `C`), `lexical` `pt * vocab`. Categories `0..nt` are nonterminals and
/// `nt..nt+pt` preterminals.
///
/// # Safety
/// Each table pointer must reference the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn gf_grammar_new(
    nt: usize,
    pt: usize,
    vocab: usize,
    root: *const f64,
    binary: *const f64,
    lexical: *const f64,
    out: *mut *mut GfGrammar,
) -> GfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let sizes = GrammarSizes::new(nt, pt, vocab)?;
        let s = sizes.symbols();
        let mul = |a: usize, b: usize| {
            a.checked_mul(b)
                .ok_or_else(|| Fail(GfStatus::InvalidInput, "grammar tables too large".into()))
        };
        let root = slice_arg(root, nt, "root")?.to_vec();
        let binary = slice_arg(binary, mul(nt, mul(s, s)?)?, "binary")?.to_vec();
        let lexical = slice_arg(lexical, mul(pt, vocab)?, "lexical")?.to_vec();
        if root.iter().chain(&binary).chain(&lexical).any(|x| x.is_nan()) {
            return Err(Fail(GfStatus::NonFinite, "grammar tables contain NaN".into()));
        }
        let rules = RuleTensors::new(sizes, root, binary, lexical)?;
        let err = rules.max_normalization_error();
        if err > 1e-6 {
            return Err(Fail(
                GfStatus::InvalidInput,
                format!("rule rows must each sum to 1 (worst log-sum {err:.3e})"),
            ));
        }
        *out = Box::into_raw(Box::new(GfGrammar { rules }));
        Ok(())
    })
}

/// # Safety
/// `g` must come from [`gf_grammar_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn gf_grammar_free(g: *mut GfGrammar) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Sentence log-likelihood by the inside algorithm.
///
/// # Safety
/// `tokens` must reference `n` word ids; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gf_grammar_inside(
    g: *const GfGrammar,
    tokens: *const usize,
    n: usize,
    out: *mut f64,
) -> GfStatus {
    guard(|| {
        let g = g.as_ref().ok_or_else(|| null("grammar"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let sent = g.rules.for_sentence(slice_arg(tokens, n, "tokens")?)?;
        *out = posterior(&sent, None)?.log_z;
        Ok(())
    })
}

/// Posterior span marginals into `out[i * n + j]` for `i <= j`; the
/// lower triangle is zeroed.
///
/// # Safety
/// `tokens` must reference `n` ids and `out` room for `n * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn gf_grammar_span_marginals(
    g: *const GfGrammar,
    tokens: *const usize,
    n: usize,
    out: *mut f64,
) -> GfStatus {
    guard(|| {
        let g = g.as_ref().ok_or_else(|| null("grammar"))?;
        let toks = slice_arg(tokens, n, "tokens")?;
        let post = posterior(&g.rules.for_sentence(toks)?, None)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let dst = slice::from_raw_parts_mut(out, n * n);
        for i in 0..n {
            for j in 0..n {
                dst[i * n + j] = if j >= i { post.span_marginal((i, j)) } else { 0.0 };
            }
        }
        Ok(())
    })
}

/// Best tree. `spans` receives `(first, last)` pairs for the `n - 1`
/// constituents of width at least 2 in ascending order, so it needs room
/// for `2 * (n - 1)` values; `*count` is set to the pair count.
///
/// # Safety
/// `tokens` must reference `n` ids; `spans` must hold `2 * (n - 1)` values.
#[no_mangle]
pub unsafe extern "C" fn gf_grammar_viterbi(
    g: *const GfGrammar,
    tokens: *const usize,
    n: usize,
    score: *mut f64,
    spans: *mut usize,
    count: *mut usize,
) -> GfStatus {
    guard(|| {
        let g = g.as_ref().ok_or_else(|| null("grammar"))?;
        let toks = slice_arg(tokens, n, "tokens")?;
        let (best, tree) = viterbi_scored(&g.rules.for_sentence(toks)?)?;
        if score.is_null() || spans.is_null() || count.is_null() {
            return Err(null("output pointer"));
        }
        let dst = slice::from_raw_parts_mut(spans, 2 * n.saturating_sub(1));
        for (k, &(i, j)) in tree.spans().iter().enumerate() {
            dst[2 * k] = i;
            dst[2 * k + 1] = j;
        }
        *score = best;
        *count = tree.spans().len();
        Ok(())
    })
}

/// Corpus and sentence F1 (percent) between newline-separated bracketed
/// trees. Sentences whose gold tree has no nontrivial span are skipped.
///
/// # Safety
/// Both texts must be NUL-terminated; `c_f1` and `s_f1` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gf_f1(
    predicted: *const c_char,
    gold: *const c_char,
    c_f1: *mut f64,
    s_f1: *mut f64,
) -> GfStatus {
    guard(|| {
        let punct = Punctuation::default();
        let read = |text: &str, what: &str| {
            gramfuse::dataio::parse_gold_text(text, &punct)
                .map_err(|(line, msg)| Fail(GfStatus::Format, format!("{what} line {line}: {msg}")))
        };
        let pred = read(str_arg(predicted, "predicted")?, "predicted")?;
        let gold = read(str_arg(gold, "gold")?, "gold")?;
        let trees = |v: Vec<gramfuse::dataio::GoldTree>| v.into_iter().map(|g| g.tree).collect::<Vec<_>>();
        let f = f1_scores(&trees(pred), &trees(gold))?;
        let (c, s) = (c_f1.as_mut().ok_or_else(|| null("c_f1"))?, s_f1.as_mut().ok_or_else(|| null("s_f1"))?);
        *c = f.c_f1;
        *s = f.s_f1;
        Ok(())
    })
}
