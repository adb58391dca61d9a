//! Rasterizes a two-object layout and prints the region map as ASCII.
//!
//! `cargo run --example encode_layout -- [out.png]`

use multicomp::layout::{encode_layout, BBox, LayoutSpec, Region};

fn main() -> multicomp::Result<()> {
    let layout = LayoutSpec::new(
        vec![BBox::new(0.1, 0.2, 0.55, 0.7), BBox::new(0.4, 0.35, 0.85, 0.9)],
        BBox::new(0.05, 0.1, 0.95, 0.95),
    );
    let mask = encode_layout(&layout, (16, 16))?;
    for (k, region) in mask.decode().iter().enumerate() {
        let ch = match region {
            Some(Region::Background) => '.',
            Some(Region::Inpaint) => '-',
            Some(Region::Object(i)) => char::from_digit(*i as u32, 10).unwrap_or('?'),
            Some(Region::Overlap) => '#',
            None => '?',
        };
        print!("{ch}");
        if (k + 1) % mask.width == 0 {
            println!();
        }
    }
    if let Some(path) = std::env::args().nth(1) {
        encode_layout(&layout, (64, 64))?.save_png(path.as_ref())?;
        println!("wrote {path}");
    }
    Ok(())
}
