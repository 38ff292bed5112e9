use crate::config::Scenario;

/// Estimation pipelines and protocols selectable in `methods`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Plug-in on component-wise moments.
    PluginCw,
    /// Plug-in on inverse-propensity debiased moments (true `Π`).
    PluginDebiased,
    /// Plug-in on zero-imputed moments.
    PluginZero,
    /// Population-optimal client-wise linear predictor.
    Oracle,
    ItrZero,
    /// Optimal linear imputation with the population covariance.
    ItrOptPop,
    /// Optimal linear imputation with the component-wise covariance estimate.
    ItrOptCw,
    ItrIce,
    Local,
    OneShotMoments,
    OneShotRidge,
    FederatedIce,
    FedavgRidge,
}

impl Method {
    pub const ALL: [Method; 13] = [
        Method::PluginCw,
        Method::PluginDebiased,
        Method::PluginZero,
        Method::Oracle,
        Method::ItrZero,
        Method::ItrOptPop,
        Method::ItrOptCw,
        Method::ItrIce,
        Method::Local,
        Method::OneShotMoments,
        Method::OneShotRidge,
        Method::FederatedIce,
        Method::FedavgRidge,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::PluginCw => "plugin-cw",
            Method::PluginDebiased => "plugin-debiased",
            Method::PluginZero => "plugin-zero",
            Method::Oracle => "oracle",
            Method::ItrZero => "itr-zero",
            Method::ItrOptPop => "itr-opt-pop",
            Method::ItrOptCw => "itr-opt-cw",
            Method::ItrIce => "itr-ice",
            Method::Local => "local",
            Method::OneShotMoments => "one-shot-moments",
            Method::OneShotRidge => "one-shot-ridge",
            Method::FederatedIce => "federated-ice",
            Method::FedavgRidge => "fedavg-ridge",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn is_protocol(&self) -> bool {
        matches!(
            self,
            Method::OneShotMoments | Method::OneShotRidge | Method::FederatedIce | Method::FedavgRidge
        )
    }

    /// Whether the fit depends on the ridge penalty.
    pub fn uses_lambda(&self) -> bool {
        matches!(
            self,
            Method::ItrZero
                | Method::ItrOptPop
                | Method::ItrOptCw
                | Method::ItrIce
                | Method::Local
                | Method::OneShotRidge
                | Method::FedavgRidge
        )
    }

    /// Reason the method cannot run in `scenario`, if any.
    pub fn unsupported_in(&self, scenario: Scenario) -> Option<&'static str> {
        match scenario {
            Scenario::CommAudit if !self.is_protocol() => Some("comm-audit runs protocols only"),
            Scenario::CommAudit => None,
            _ if self.is_protocol() => Some("protocols run in comm-audit only"),
            Scenario::TypicalCaseSweep if !matches!(self, Method::ItrZero) => {
                Some("typical-case-sweep supports itr-zero only")
            }
            _ => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
