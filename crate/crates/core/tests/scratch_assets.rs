use kbarb_core::sim::assets;
use std::path::Path;

#[test]
fn write_assets() {
    let dir = Path::new("/root/crate/assets");
    std::fs::create_dir_all(dir).unwrap();
    let (ontology, base_kb) = assets::default_domain(15, 4, 0xCAFE);
    ontology.save(&dir.join("ontology.json")).unwrap();
    base_kb.save(&dir.join("base_kb.json")).unwrap();
    assets::default_templates().save(&dir.join("templates.json")).unwrap();
    let profile = assets::default_checkin_profile();
    std::fs::write(dir.join("checkin_profile.json"), serde_json::to_string_pretty(&profile).unwrap()).unwrap();
    println!("assets written: kb rows = {}", base_kb.len());
}
