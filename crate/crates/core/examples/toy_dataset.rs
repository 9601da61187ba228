//! Writes the synthetic three-class "hue shapes" dataset.
//!
//! ```text
//! cargo run -p derma-core --example toy_dataset -- <out_dir> [per_class] [size] [seed]
//! ```

use std::path::PathBuf;

use derma_core::dataset::synthetic::write_hue_dataset;

fn main() {
    let mut args = std::env::args().skip(1);
    let Some(out) = args.next().map(PathBuf::from) else {
        eprintln!("usage: toy_dataset <out_dir> [per_class] [size] [seed]");
        std::process::exit(2);
    };
    let mut num = |default: u64| args.next().map_or(default, |s| s.parse().expect("numeric argument"));
    let (per_class, size, seed) = (num(100), num(128), num(7));
    match write_hue_dataset(&out, per_class as usize, size as u32, seed) {
        Ok(tax) => println!("wrote {} images per class for {:?} to {}", per_class, tax.classes(), out.display()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
