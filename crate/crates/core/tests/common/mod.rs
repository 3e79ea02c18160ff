#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rationale_core::data::{TokenizedInstance, CLS, SEP};

/// `[CLS] doc [SEP] query [SEP]` with a random gold mask over the document and sentence
/// boundaries every few tokens.
pub fn random_instance(
    seed: u64,
    doc_len: usize,
    query_len: usize,
    vocab: usize,
) -> TokenizedInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let density: f64 = rng.gen_range(0.05..0.95);
    let mut tokens = vec![CLS];
    let mut rationale = vec![0u8];
    let mut sentence_ids = vec![0usize];
    let mut sentence = 1;
    for i in 0..doc_len {
        if i > 0 && rng.gen_bool(0.25) {
            sentence += 1;
        }
        tokens.push(rng.gen_range(5..vocab));
        rationale.push(u8::from(rng.gen_bool(density)));
        sentence_ids.push(sentence);
    }
    let first_sep = tokens.len();
    tokens.push(SEP);
    rationale.push(0);
    sentence_ids.push(sentence + 1);
    let q_start = tokens.len();
    for _ in 0..query_len {
        tokens.push(rng.gen_range(5..vocab));
        rationale.push(1);
        sentence_ids.push(sentence + 2);
    }
    let last_sep = tokens.len();
    tokens.push(SEP);
    rationale.push(0);
    sentence_ids.push(sentence + 3);
    TokenizedInstance {
        tokens,
        rationale,
        label: rng.gen_range(0..2),
        sentence_ids,
        query_span: q_start..q_start + query_len,
        special_positions: vec![0, first_sep, last_sep],
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Round-half-up of `n% · size`, computed in floating point.
pub fn expected_count(n: u32, size: usize) -> usize {
    (f64::from(n) * size as f64 / 100.0 + 0.5).floor() as usize
}

/// Gold rationale restricted to non-forced positions.
pub fn free_gold(inst: &TokenizedInstance) -> Vec<u8> {
    let forced = inst.forced();
    inst.rationale
        .iter()
        .zip(&forced)
        .map(|(&r, &f)| if f { 0 } else { r })
        .collect()
}
