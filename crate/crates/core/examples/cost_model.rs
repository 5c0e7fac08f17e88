//! Feeds the shipped latency calibration back through the cost model and
//! prints a table alongside modeled speedups.

use litevlm::pipeline::{CostCalibration, LatencyInputs, Profile};

fn main() -> litevlm::Result<()> {
    let calib = CostCalibration::shipped();
    let base = calib.baseline_total_ms();
    println!("{:<24} {:>7} {:>8} {:>7} {:>8} {:>7} {:>8} {:>6} {:>8} {:>6}", "row", "patches", "vit", "tokens", "prefill", "ext1", "decode", "sel", "total", "x");
    for row in &calib.rows {
        let l = calib.model_latency(&calib.row_inputs(row), row.profile)?;
        println!(
            "{:<24} {:>7.1} {:>8.1} {:>7.0} {:>8.1} {:>7.2} {:>8.1} {:>6.1} {:>8.1} {:>6.2}",
            row.name, row.patches, l.vit_ms, row.input_tokens, l.prefill_ms, l.extend_one_ms, l.decode_ms, l.selection_ms, l.total_ms, base / l.total_ms
        );
    }

    // A hypothetical run: 6 patches, 1200 tokens, 13.6 tokens in 5 iterations.
    let run = LatencyInputs {
        patches: 6.0,
        input_tokens: 1200.0,
        generated_tokens: 13.6,
        iterations: 5.0,
        speculative: true,
        selection: true,
    };
    for p in [Profile::Fp16, Profile::Fp8] {
        let l = calib.model_latency(&run, p)?;
        println!("hypothetical {p}: {:.1} ms total, {:.2}x", l.total_ms, base / l.total_ms);
    }
    Ok(())
}
