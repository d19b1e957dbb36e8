//! Wiring a pipeline from configuration.

use std::sync::Arc;

use provgate_core::clock::{Clock, SystemClock};
use provgate_core::coap::{RetransmitPolicy, UdpLink, UdpServer};
use provgate_core::context::ContextSettings;
use provgate_core::device::{DeviceServer, Executor, Fleet, TicketBook};
use provgate_core::evaluator::{CatalogHandle, EvalSettings};
use provgate_core::ledger::Ledger;
use provgate_core::pipeline::{Pipeline, PipelineSettings};
use provgate_core::verifier::Verifier;

use crate::config::{ConfigError, GatewayConfig};

/// A running pipeline plus the device endpoint it talks to, if that
/// endpoint is a real UDP socket.
pub struct Gateway {
    pub pipeline: Arc<Pipeline>,
    pub device_endpoint: Option<UdpServer>,
}

pub fn build(config: &GatewayConfig) -> Result<Gateway, ConfigError> {
    build_with_clock(config, Arc::new(SystemClock))
}

pub fn build_with_clock(config: &GatewayConfig, clock: Arc<dyn Clock>) -> Result<Gateway, ConfigError> {
    config.validate()?;
    let catalog = CatalogHandle::new(config.catalog()?);
    let ledger = Arc::new(Ledger::new(clock.clone()));
    let fleet = Arc::new(
        Fleet::from_specs(config.seed, &config.devices).map_err(|e| ConfigError::Invalid(e.to_string()))?,
    );
    let (executor, device_endpoint) = match config.coap_port {
        None => (Executor::in_process(fleet.clone(), ledger.clone(), clock.clone()), None),
        Some(port) => {
            let tickets = Arc::new(TicketBook::new());
            let server_side = Arc::new(DeviceServer::new(fleet.clone(), tickets.clone()));
            let endpoint = UdpServer::spawn(
                (config.http_host.as_str(), port),
                Arc::new(move |b: &[u8]| server_side.handle_datagram(b)),
            )
            .map_err(|e| ConfigError::Invalid(format!("binding device endpoint: {e}")))?;
            let link = UdpLink::connect(endpoint.local_addr(), RetransmitPolicy::default())
                .map_err(|e| ConfigError::Invalid(format!("connecting device link: {e}")))?;
            tracing::info!(addr = %endpoint.local_addr(), "device endpoint listening");
            (
                Executor::new(Arc::new(link), tickets, ledger.clone(), clock.clone()),
                Some(endpoint),
            )
        }
    };
    let verifier = Arc::new(Verifier::new(
        config.principals.clone(),
        config.pending_ttl_ms,
        ledger.clone(),
        catalog.clone(),
        clock.clone(),
    ));
    let settings = PipelineSettings {
        difficulty: config.difficulty,
        context: ContextSettings {
            window: config.window,
            group_size: config.group_size,
            max_physical_age_ms: config.max_physical_age_ms,
        },
        eval: EvalSettings {
            max_snapshot_age_ms: config.max_snapshot_age_ms,
            provenance_threshold: config.provenance_threshold,
        },
        miners: config.miners.clone(),
        bootstrap: config.bootstrap.clone(),
    };
    let pipeline = Pipeline::new(clock, ledger, fleet, Arc::new(executor), verifier, catalog, settings);
    Ok(Gateway {
        pipeline: Arc::new(pipeline),
        device_endpoint,
    })
}
