//! Sentence-slice crossover.
//!
//! Texts are split into sentence slices (after runs of `.;!?`), each parent
//! is cut at a uniformly random interior boundary, and the suffixes are
//! exchanged. The operation conserves the combined multiset of slices: no
//! slice is created, duplicated, or lost — a property the tests lean on.

use rand::Rng;

use crate::textutil::sentence_slices;

/// Exchanges suffixes at explicit cut points (`cut` slices stay with the
/// original text). Exposed for deterministic tests; [`crossover`] picks the
/// cuts randomly.
pub fn crossover_at(a: &str, b: &str, cut_a: usize, cut_b: usize) -> (String, String) {
    let slices_a = sentence_slices(a);
    let slices_b = sentence_slices(b);
    assert!(cut_a >= 1 && cut_a < slices_a.len(), "cut_a out of range");
    assert!(cut_b >= 1 && cut_b < slices_b.len(), "cut_b out of range");
    let child_one = [&slices_a[..cut_a], &slices_b[cut_b..]].concat().join(" ");
    let child_two = [&slices_b[..cut_b], &slices_a[cut_a..]].concat().join(" ");
    (child_one, child_two)
}

/// Crossover with uniformly random interior cuts. A parent without an
/// interior boundary (one slice or fewer) cannot be cut, so the pair comes
/// back unchanged.
pub fn crossover(a: &str, b: &str, rng: &mut impl Rng) -> (String, String) {
    let len_a = sentence_slices(a).len();
    let len_b = sentence_slices(b).len();
    if len_a < 2 || len_b < 2 {
        return (a.to_string(), b.to_string());
    }
    let cut_a = rng.random_range(1..len_a);
    let cut_b = rng.random_range(1..len_b);
    crossover_at(a, b, cut_a, cut_b)
}
