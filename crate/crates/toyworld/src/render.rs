use image::{Rgb, RgbImage};

use crate::{Entity, Variant, BALL, BOX, CUP, KITE, PERSON};

const BACKGROUND: [u8; 3] = [12, 12, 16];
const SKIN: [u8; 3] = [150, 150, 150];

fn base_color(category: hoi_core::ObjectId) -> [f64; 3] {
    match category {
        BALL => [220.0, 50.0, 50.0],
        CUP => [50.0, 90.0, 220.0],
        KITE => [50.0, 190.0, 70.0],
        BOX => [230.0, 170.0, 40.0],
        _ => [200.0, 200.0, 200.0],
    }
}

fn color(e: &Entity) -> [u8; 3] {
    if e.category == PERSON {
        return SKIN;
    }
    let c = base_color(e.category).map(|v| match e.variant.unwrap_or(Variant::Full) {
        Variant::Full => v,
        Variant::Dark => v * 0.45,
        Variant::Pastel => v * 0.45 + 130.0,
    });
    c.map(|v| v.round().clamp(0.0, 255.0) as u8)
}

/// Whether the pixel centered at `(px, py)` belongs to the entity's shape.
fn covers(e: &Entity, px: f64, py: f64) -> bool {
    let [x1, y1, x2, y2] = e.bbox;
    if px < x1 || px >= x2 || py < y1 || py >= y2 {
        return false;
    }
    let (u, v) = ((px - x1) / (x2 - x1), (py - y1) / (y2 - y1));
    match e.category {
        BALL => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        // Wider at the rim than at the base.
        CUP => (u - 0.5).abs() <= 0.5 - 0.25 * v,
        KITE => (u - 0.5).abs() + (v - 0.5).abs() <= 0.5,
        _ => true,
    }
}

/// Draws people first, then objects in list order, on a dark background.
pub fn render(width: u32, height: u32, entities: &[Entity]) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb(BACKGROUND));
    let order = entities
        .iter()
        .filter(|e| e.category == PERSON)
        .chain(entities.iter().filter(|e| e.category != PERSON));
    for e in order {
        let c = Rgb(color(e));
        let [x1, y1, x2, y2] = e.bbox;
        let xs = (x1.floor().max(0.0) as u32)..(x2.ceil().min(width as f64) as u32);
        for y in (y1.floor().max(0.0) as u32)..(y2.ceil().min(height as f64) as u32) {
            for x in xs.clone() {
                if covers(e, x as f64 + 0.5, y as f64 + 0.5) {
                    img.put_pixel(x, y, c);
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_variants() {
        let ball = Entity {
            category: BALL,
            bbox: [0.0, 0.0, 8.0, 8.0],
            variant: Some(Variant::Dark),
        };
        let img = render(8, 8, &[ball]);
        assert_eq!(img.get_pixel(0, 0).0, BACKGROUND);
        assert_eq!(img.get_pixel(4, 4).0, [99, 23, 23]);
        let person = Entity {
            category: PERSON,
            bbox: [0.0, 0.0, 8.0, 8.0],
            variant: None,
        };
        // Objects are drawn over people regardless of list order.
        let img = render(8, 8, &[ball, person]);
        assert_eq!(img.get_pixel(4, 4).0, [99, 23, 23]);
        assert_eq!(img.get_pixel(0, 0).0, SKIN);
    }
}
