//! Segments a log into chunks, embeds and clusters them, and prints the
//! 2-D projection of every chunk.
//!
//! ```text
//! cargo run --example segment_and_cluster [path/to/log]
//! ```

use std::path::PathBuf;

use schemacoder::corpus::{load_log, segment, SegmentConfig};
use schemacoder::embedding::{cluster, embed_chunks, pca_project, sample_representatives};

fn main() {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/e2e/app.log"));
    let log = load_log(&path).expect("readable log");
    let chunks = segment(&log, &SegmentConfig { max_lines: 20, max_tokens: 2048 });
    println!("{} lines -> {} chunks", log.total_lines(), chunks.len());

    let vectors = embed_chunks(&chunks, 256);
    let clustering = cluster(&vectors, None, 0);
    let points: Vec<&[f64]> = vectors.iter().map(|v| v.values.as_slice()).collect();
    let projection = pca_project(&points, 2.min(points.len()));

    println!("chunk  lines      tokens  cluster  pc1       pc2");
    for (i, c) in chunks.iter().enumerate() {
        let p = &projection.points[i];
        println!(
            "{:<6} {:>4}-{:<5} {:>6}  {:>7}  {:>8.4}  {:>8.4}",
            c.id,
            c.line_span.0,
            c.line_span.1,
            c.tokens(),
            clustering.assignments[i],
            p[0],
            p.get(1).copied().unwrap_or(0.0)
        );
    }
    println!("representatives: {:?}", sample_representatives(&clustering, 2, 0));
}
