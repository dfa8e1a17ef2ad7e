//! Synthetic corpora for scheduler and training experiments.

use rand::Rng as _;

use crate::rng::{seed_rng, split};

/// Token documents with cross-segment structure: most segments are
/// noisy copies of an earlier segment (distance up to `max_back`), so
/// predicting them well requires information carried by memories.
pub fn token_documents(
    n_docs: usize,
    segments_per_doc: usize,
    seg_len: usize,
    vocab: usize,
    seed: u64,
) -> Vec<Vec<Vec<usize>>> {
    let max_back = 6;
    (0..n_docs)
        .map(|d| {
            let mut rng = seed_rng(split(seed, d as u64));
            let mut doc: Vec<Vec<usize>> = Vec::with_capacity(segments_per_doc);
            for t in 0..segments_per_doc {
                let seg = if t > 0 && rng.gen_bool(0.8) {
                    let back = rng.gen_range(1..=t.min(max_back));
                    let mut seg = doc[t - back].clone();
                    // light token noise so copies are imperfect
                    for tok in seg.iter_mut() {
                        if rng.gen_bool(0.1) {
                            *tok = rng.gen_range(0..vocab);
                        }
                    }
                    seg
                } else {
                    (0..seg_len).map(|_| rng.gen_range(0..vocab)).collect()
                };
                doc.push(seg);
            }
            doc
        })
        .collect()
}

/// Independent uniform token sequences of a fixed length.
pub fn token_samples(n: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = seed_rng(seed);
    (0..n)
        .map(|_| (0..len).map(|_| rng.gen_range(0..vocab)).collect())
        .collect()
}

/// One long uniform token stream.
pub fn token_stream(len: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = seed_rng(seed);
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}
