use std::fmt::Write;

use super::manifest::DatasetManifest;

/// FeatureCollection with one Point per region, coordinates in (lon, lat)
/// order printed with six decimals.
pub fn export_points_geojson(m: &DatasetManifest) -> String {
    let mut out = String::from("{\"type\":\"FeatureCollection\",\"features\":[");
    for (i, r) in m.regions.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(
            out,
            "{{\"type\":\"Feature\",\"geometry\":{{\"type\":\"Point\",\"coordinates\":[{:.6},{:.6}]}},\
             \"properties\":{{\"scene_id\":{},\"months_done\":{},\"unfavorable_count\":{}}}}}",
            r.center.lon,
            r.center.lat,
            r.scene_id,
            r.months_done(),
            r.unfavorable_count()
        )
        .unwrap();
    }
    out.push_str("]}");
    out
}
