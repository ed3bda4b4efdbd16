//! Inputs shared by the benchmarks.

use transducer_core::encoding::Encoding;
use transducer_core::pde::{generate_meta_dataset, GenerationConfig};
use transducer_core::training::{encode_meta, Episode};

/// One encoded desk-scale ADR episode with `context` pairs and `queries`
/// queries.
pub fn adr_episode(context: usize, queries: usize) -> Episode {
    let cfg = GenerationConfig {
        n_datasets: 1,
        pairs: context + queries,
        ..GenerationConfig::desk(0)
    };
    let meta = generate_meta_dataset(&cfg).expect("desk generation");
    let enc = Encoding::fourier(51, cfg.grid).expect("modes fit the grid");
    let em = encode_meta(&meta, enc, enc).expect("encoding");
    let c: Vec<usize> = (0..context).collect();
    let q: Vec<usize> = (context..context + queries).collect();
    em.operators[0].episode(&c, &q).expect("split")
}
