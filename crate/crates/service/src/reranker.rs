use std::time::Duration;

use trigserve::selection::{ExternalRerankRequest, ExternalRerankResponse, RerankClient};

/// Posts the rerank request as JSON to a fixed URL.
#[derive(Debug)]
pub struct HttpRerankClient {
    url: String,
    agent: ureq::Agent,
}

impl HttpRerankClient {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpRerankClient {
            url: url.into(),
            agent,
        }
    }
}

impl RerankClient for HttpRerankClient {
    fn rerank(&self, request: &ExternalRerankRequest) -> Result<ExternalRerankResponse, String> {
        self.agent
            .post(&self.url)
            .send_json(request)
            .map_err(|e| e.to_string())?
            .body_mut()
            .read_json::<ExternalRerankResponse>()
            .map_err(|e| e.to_string())
    }
}
