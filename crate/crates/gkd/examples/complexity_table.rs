//! Static parameter and FLOP counts for the teacher and student detectors,
//! with a per-layer breakdown. One multiply-accumulate counts as one FLOP;
//! bias additions and activations are ignored.

use gkd::detector::{count_complexity, layer_stack, DetectorConfig};

fn main() {
    let teacher = DetectorConfig::teacher_toy();
    let student = DetectorConfig::student_toy();

    println!("{:<10} {:>10} {:>14}", "model", "params", "flops/image");
    for (name, config) in [("teacher", &teacher), ("student", &student)] {
        let c = count_complexity(config);
        println!("{name:<10} {:>10} {:>14}", c.params, c.flops);
    }
    let t = count_complexity(&teacher);
    let s = count_complexity(&student);
    println!(
        "student/teacher: {:.3}x params, {:.3}x flops\n",
        s.params as f64 / t.params as f64,
        s.flops as f64 / t.flops as f64
    );

    println!("teacher layers:");
    println!("  {:<22} {:>8} {:>12}", "layer", "params", "flops");
    for layer in layer_stack(&teacher) {
        println!("  {:<22} {:>8} {:>12}", layer.name, layer.params, layer.flops);
    }

    // Costs scale with resolution but parameters do not.
    let big = DetectorConfig { input_height: 128, input_width: 128, ..teacher.clone() };
    let b = count_complexity(&big);
    println!(
        "\nteacher at 128x128: params {} (unchanged), flops {} ({:.1}x)",
        b.params,
        b.flops,
        b.flops as f64 / t.flops as f64
    );
}
