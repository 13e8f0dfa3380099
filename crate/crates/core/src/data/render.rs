//! Procedural rasterisers for both scene kinds.

use super::scene::{Scene, Scene2D, Scene3D, GRID, TABLE_SLOTS};
use super::Raster;

pub const TILE: usize = 8;
pub const GRID_PX: usize = GRID * TILE;
pub const TABLE_PX: usize = 64;
const SLOT_PX: i32 = (TABLE_PX / TABLE_SLOTS) as i32;

pub const COLOR_RGB: [[u8; 3]; 6] = [
    [0, 0, 255],
    [0, 255, 0],
    [100, 100, 100],
    [112, 39, 195],
    [255, 0, 0],
    [255, 255, 0],
];

pub const BOWL_RGB: [[u8; 3]; 6] = [
    [139, 69, 19],
    [0, 255, 255],
    [255, 165, 0],
    [0, 95, 106],
    [255, 105, 180],
    [255, 255, 255],
];

const GLYPHS: [[&str; TILE]; 3] = [
    [
        "........", "..####..", ".######.", ".######.", ".######.", ".######.", "..####..", "........",
    ],
    [
        "........", ".######.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".######.", "........",
    ],
    [
        "........", ".###....", ".#.#####", ".###..#.", "......##", "........", "........", "........",
    ],
];

pub fn render(scene: &Scene) -> Raster {
    match scene {
        Scene::Grid(s) => render_grid(s),
        Scene::Table(s) => render_table(s),
    }
}

fn render_grid(scene: &Scene2D) -> Raster {
    let mut r = Raster::zeros(GRID_PX, GRID_PX);
    for row in 0..GRID {
        for col in 0..GRID {
            let Some(o) = scene.get(row, col) else { continue };
            let rgb = COLOR_RGB[o.color as usize];
            for (y, line) in GLYPHS[o.object as usize].iter().enumerate() {
                for (x, ch) in line.bytes().enumerate() {
                    if ch == b'#' {
                        r.put(row * TILE + y, col * TILE + x, rgb);
                    }
                }
            }
        }
    }
    r
}

fn slot_center(slot: u8, jitter: (i8, i8)) -> (i32, i32) {
    let row = (slot as usize / TABLE_SLOTS) as i32;
    let col = (slot as usize % TABLE_SLOTS) as i32;
    (
        row * SLOT_PX + SLOT_PX / 2 + jitter.0 as i32,
        col * SLOT_PX + SLOT_PX / 2 + jitter.1 as i32,
    )
}

fn render_table(scene: &Scene3D) -> Raster {
    let mut r = Raster::zeros(TABLE_PX, TABLE_PX);
    for bowl in &scene.bowls {
        let (cy, cx) = slot_center(bowl.slot, bowl.jitter);
        // Ring of outer diameter 12 px, 2 px wall.
        for y in cy - 6..cy + 6 {
            for x in cx - 6..cx + 6 {
                let dy = y as f32 + 0.5 - cy as f32;
                let dx = x as f32 + 0.5 - cx as f32;
                let d2 = dx * dx + dy * dy;
                if (16.0..=36.0).contains(&d2) {
                    r.put_clipped(y, x, BOWL_RGB[bowl.color as usize]);
                }
            }
        }
    }
    for (i, block) in scene.blocks.iter().enumerate() {
        let (cy, cx) = match scene.placed {
            Some((b, w)) if b == i => {
                let bowl = scene.bowls[w];
                slot_center(bowl.slot, bowl.jitter)
            }
            _ => slot_center(block.slot, block.jitter),
        };
        let half = if block.size == 0 { 5 } else { 3 };
        for y in cy - half..cy + half {
            for x in cx - half..cx + half {
                r.put_clipped(y, x, COLOR_RGB[block.color as usize]);
            }
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::GridObject;

    #[test]
    fn empty_scenes_render_black() {
        assert!(render(&Scene::Grid(Scene2D::default())).data.iter().all(|&v| v == 0));
        assert!(render(&Scene::Table(Scene3D::default())).data.iter().all(|&v| v == 0));
    }

    #[test]
    fn red_ball_stays_in_its_tile() {
        let mut s = Scene2D::default();
        s.cells[0] = Some(GridObject { color: 4, object: 0 });
        let r = render(&Scene::Grid(s));
        let (mut red, mut other) = (0u64, 0u64);
        for y in 0..GRID_PX {
            for x in 0..GRID_PX {
                let px = [r.get(0, y, x), r.get(1, y, x), r.get(2, y, x)];
                if px != [0, 0, 0] {
                    assert!(y < TILE && x < TILE, "pixel ({y},{x}) outside tile");
                }
                red += px[0] as u64;
                other += px[1] as u64 + px[2] as u64;
            }
        }
        assert!(red > 0 && other == 0);
    }

    #[test]
    fn glyphs_are_distinct() {
        assert_ne!(GLYPHS[0], GLYPHS[1]);
        assert_ne!(GLYPHS[1], GLYPHS[2]);
        assert_ne!(GLYPHS[0], GLYPHS[2]);
    }
}
