use parfuse::scenario::*;
fn main() {
    let cfg = ScenarioConfig {
        world_x: (-14.0, 14.0),
        world_y: (-7.0, 7.0),
        aux_agents: 2,
        infra_agents: 1,
        l_max: 4,
        objects: 3,
        occluders: 1,
        frames: 8,
        frame_rate_hz: 10.0,
        vehicle_range_m: 40.0,
        infra_range_m: 60.0,
        rays_per_sweep: 360,
        max_object_speed_mps: 6.0,
    };
    match generate_scene(7, &cfg) {
        Ok(s) => println!("ok, {} frames, {} objects", s.frames.len(), s.frames[0].objects.len()),
        Err(e) => println!("err: {e}"),
    }
}
