"""公民科学目击数据的时空占有模型"""
