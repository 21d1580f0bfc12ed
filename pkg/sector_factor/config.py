# 行业因子模型配置文件

# 版本号（写入运行清单）
VERSION = '0.1.0'

# 模型结构参数
MODEL = {
    'n_sector_factors': 11,           # IBES 行业因子数量（固定）
    'default_m': 13,                  # 默认因子总数（11个行业因子 + 2个市场因子）
    'psi_floor': 1e-8,                # 特殊方差下限（收益率平方单位），防止 Heywood 情形
    'market_label_prefix': 'MKT',     # 市场因子标签前缀
    'standard_label_prefix': 'F',     # 标准（无结构）因子模型的标签前缀
}

# EM 算法参数
EM = {
    'max_iterations': 100,            # 最大迭代次数（固定协议：100次）
    'rel_tol': None,                  # 对数似然相对变化提前停止阈值（默认关闭）
    'init_scale': 0.1,                # 载荷初始化扰动的标准差（叠加在主成分起点上）
    'seed': 0,                        # 初始化随机种子
    'jitter_scale': 1e-10,            # Cholesky 失败时对角线抖动系数（乘以 trace/n）
    'monotone_slack': 1e-7,           # 单调性检查的相对容差
    'block_size': 256,                # E 步按观测分块的块宽（与线程数无关，保证结果一致）
}

# 数据处理参数
PIPELINE = {
    'on_missing': 'drop',             # 缺失或非正价格的处理方式：drop 或 error
    'demean': True,                   # 拟合前是否去均值
    'drop_unclassified': False,       # 是否剔除无行业分类的股票
    'date_format': '%Y-%m-%d',        # 日期格式（ISO-8601）
    'float_format': '%.17g',          # 写出 CSV 时的浮点格式（保证可逆）
}

# 合成数据参数
SYNTH = {
    'm': 13,                          # 因子总数
    'p': 1000,                        # 交易日数量
    'sector_loading_range': (0.5, 1.0),  # 行业载荷绝对值范围
    'market_loading_scale': 0.3,      # 市场载荷标准差
    'psi_range': (0.2, 0.5),          # 特殊方差范围
    'sector_sign_coherent': True,     # 同一行业载荷是否同号
    'start_price': 100.0,             # 价格重建的起始价格
    'start_date': '2000-01-03',       # 合成日期的起始日（按工作日展开）
    'seed': 0,                        # 随机种子
}

# 诊断报告参数
REPORT = {
    'threshold': 0.10,                # 分量筛选阈值（最大绝对值的比例）
    'coherence_scope': 'selected',    # 符号一致性统计范围：selected 或 support
    'json_filename': 'report.json',   # 机器可读报告
    'text_filename': 'report.txt',    # 人类可读报告
    'plot_dir': 'plot_data',          # 绘图数据目录
}

# 运行参数
RUNTIME = {
    'threads_env': 'SECTOR_FACTOR_THREADS',      # 限制 E 步并行线程数的环境变量
    'log_level_env': 'SECTOR_FACTOR_LOG_LEVEL',  # 覆盖日志级别的环境变量
    'log_level': 'INFO',                         # 默认日志级别
    'log_format': '%(asctime)s - %(levelname)s - %(message)s',
    'model_filename': 'model.json',              # 模型文件名
    'trace_filename': 'trace.csv',               # 对数似然轨迹文件名
    'manifest_filename': 'manifest.json',        # 运行清单文件名
    'prices_filename': 'prices.csv',             # 合成价格文件名
    'sectors_filename': 'sectors.csv',           # 合成行业文件名
    'truth_filename': 'truth_model.json',        # 合成真实模型文件名
}
