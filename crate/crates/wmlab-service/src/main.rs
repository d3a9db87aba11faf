use std::process::exit;
use std::sync::Arc;

use wmlab_service::config::{resolve_config_path, ServiceConfig};
use wmlab_service::{run_with_state, ServiceState};

#[tokio::main]
async fn main() {
    let path = resolve_config_path(std::env::args().nth(1));
    let config = match ServiceConfig::load(&path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error ({}): {e}", path.display());
            exit(2);
        }
    };
    let state = match ServiceState::from_config(&config) {
        Ok(s) => Arc::new(s),
        Err(e) => {
            eprintln!("startup error: {e}");
            exit(if e.is_config_error() { 2 } else { 1 });
        }
    };
    if let Err(e) = run_with_state(state, &config.listen).await {
        eprintln!("server error: {e}");
        exit(1);
    }
}
