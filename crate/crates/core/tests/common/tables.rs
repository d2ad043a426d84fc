//! Expected layer output sizes of the reference networks.

use raunet::architectures::{table_shape, NetworkSpec};

// (row label, output size) in encoder-then-decoder order.
pub const RAUNET1: [(&str, &str); 28] = [
    ("Input", "256^2×1"),
    ("Conv1", "256^2×16"),
    ("Pooling", "128^2×16"),
    ("Res1", "128^2×16"),
    ("Pooling", "64^2×16"),
    ("Res2", "64^2×32"),
    ("Pooling", "32^2×32"),
    ("Res3", "32^2×64"),
    ("Pooling", "16^2×64"),
    ("Res4", "16^2×128"),
    ("Pooling", "8^2×128"),
    ("Res5", "8^2×256"),
    ("Res6", "8^2×256"),
    ("Up1", "16^2×256"),
    ("Att1", "16^2×128"),
    ("Res7", "16^2×128"),
    ("Up2", "32^2×128"),
    ("Att2", "32^2×64"),
    ("Res8", "32^2×64"),
    ("Up3", "64^2×64"),
    ("Att3", "64^2×32"),
    ("Res9", "64^2×32"),
    ("Up4", "128^2×32"),
    ("Att4", "128^2×16"),
    ("Res10", "128^2×16"),
    ("Up5", "256^2×16"),
    ("Conv2", "256^2×16"),
    ("Conv3", "256^2×1"),
];

pub const RAUNET2: [(&str, &str); 28] = [
    ("Input", "224^2×32×1"),
    ("Conv1", "224^2×32×32"),
    ("Pooling", "112^2×16×32"),
    ("Res1", "112^2×16×32"),
    ("Pooling", "56^2×8×32"),
    ("Res2", "56^2×8×64"),
    ("Pooling", "28^2×4×64"),
    ("Res3", "28^2×4×128"),
    ("Pooling", "14^2×2×128"),
    ("Res4", "14^2×2×256"),
    ("Pooling", "7^2×1×256"),
    ("Res5", "7^2×1×512"),
    ("Res6", "7^2×1×512"),
    ("Up1", "14^2×2×512"),
    ("Att1", "14^2×2×256"),
    ("Res7", "14^2×2×256"),
    ("Up2", "28^2×4×256"),
    ("Att2", "28^2×4×128"),
    ("Res8", "28^2×4×128"),
    ("Up3", "56^2×8×128"),
    ("Att3", "56^2×8×64"),
    ("Res9", "56^2×8×64"),
    ("Up4", "112^2×16×64"),
    ("Att4", "112^2×16×32"),
    ("Res10", "112^2×16×32"),
    ("Up5", "224^2×32×32"),
    ("Conv2", "224^2×32×32"),
    ("Conv3", "224^2×32×1"),
];

pub const RAUNET_BRAIN: [(&str, &str); 28] = [
    ("Input", "64^3×4"),
    ("Conv1", "64^3×32"),
    ("Pooling", "32^3×32"),
    ("Res1", "32^3×64"),
    ("Pooling", "16^3×64"),
    ("Res2", "16^3×128"),
    ("Pooling", "8^3×128"),
    ("Res3", "8^3×256"),
    ("Pooling", "4^3×256"),
    ("Res4", "4^3×512"),
    ("Pooling", "2^3×512"),
    ("Res5", "2^3×512"),
    ("Res6", "2^3×512"),
    ("Up1", "4^3×512"),
    ("Att1", "4^3×512"),
    ("Res7", "4^3×512"),
    ("Up2", "8^3×512"),
    ("Att2", "8^3×256"),
    ("Res8", "8^3×256"),
    ("Up3", "16^3×256"),
    ("Att3", "16^3×128"),
    ("Res9", "16^3×128"),
    ("Up4", "32^3×128"),
    ("Att4", "32^3×64"),
    ("Res10", "32^3×64"),
    ("Up5", "64^3×64"),
    ("Conv2", "64^3×32"),
    ("Conv3", "64^3×1"),
];

/// Compares every traced layer against `table`, reporting the first mismatch.
pub fn check_table(name: &str, table: &[(&str, &str); 28]) -> Result<(), String> {
    let spec = NetworkSpec::build(name).map_err(|e| e.to_string())?;
    let shapes = spec.trace_shapes(&spec.input_shape).map_err(|e| e.to_string())?;
    if shapes.len() != table.len() {
        return Err(format!("{name}: {} layers, expected {}", shapes.len(), table.len()));
    }
    for ((entry, shape), (label, size)) in spec.entries.iter().zip(&shapes).zip(table) {
        let got = table_shape(shape);
        if entry.table_label() != *label || got != *size {
            return Err(format!("{name} {}: {} {got}, expected {label} {size}", entry.name, entry.table_label()));
        }
    }
    Ok(())
}
